// SPDX-License-Identifier: Apache-2.0
//
// Dense batch tensors, perceptrons with hand-written reverse mode, the
// optimizers used by the trainer, and a central-difference gradient checker.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qposer/rng.hpp"

namespace qposer {

/// Row-major batch x features matrix; the only tensor rank the models need.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { leaky_relu, tanh, identity };

constexpr double kLeakySlope = 0.2;

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct MlpSpec {
    std::vector<int> layer_widths;  // input, hidden..., output
    Activation activation = Activation::leaky_relu;  // hidden layers only

    void validate() const;
    int input_width() const { return layer_widths.front(); }
    int output_width() const { return layer_widths.back(); }
    std::size_t parameter_count() const;
    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct DenseLayer {
    Tensor weight;  // out x in
    Vector bias;    // out
};

struct MlpParams {
    MlpSpec spec;
    std::vector<DenseLayer> layers;

    /// Glorot-uniform weights, zero bias.
    static MlpParams init(const MlpSpec& spec, Rng& rng);
    static MlpParams zeros(const MlpSpec& spec);

    std::size_t parameter_count() const { return spec.parameter_count(); }

    /// Raw views over every weight then bias, layer by layer.
    std::vector<std::span<double>> blocks();
    std::vector<std::span<const double>> blocks() const;
};

using MlpGrads = MlpParams;

/// Per-layer activations kept by the forward pass.
struct MlpCache {
    std::vector<Tensor> inputs;          // input to each affine layer
    std::vector<Tensor> preactivations;  // affine output of each layer
    const MlpParams* params = nullptr;
};

struct MlpOutput {
    Tensor output;
    MlpCache cache;
};

MlpOutput mlp_forward(const MlpParams& params, const Tensor& input);

/// Forward pass without retaining the cache.
Tensor mlp_apply(const MlpParams& params, const Tensor& input);

struct MlpBackward {
    Tensor input_grad;
    MlpGrads param_grads;
};

MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, const Tensor& upstream);

/// Accumulating variant: adds the parameter gradients into `grads` and returns the input gradient.
Tensor mlp_backward_accumulate(const MlpParams& params, const MlpCache& cache, const Tensor& upstream, MlpGrads& grads);

/// Smallest |pre-activation| over hidden layers of a cache (distance to the leaky-ReLU kink).
double min_kink_distance(const MlpCache& cache);

// ---------------------------------------------------------------------------
// Optimization

enum class OptimizerKind { sgd_momentum, adaptive_moments };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adaptive_moments;
    double learning_rate = 1e-3;
    double momentum = 0.0;  // sgd_momentum; 0 gives plain SGD
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t step_count = 0;
    std::vector<std::vector<double>> first_moment;   // velocity for SGD
    std::vector<std::vector<double>> second_moment;  // adaptive only

    static OptimizerState sgd(double lr, double momentum = 0.0);
    static OptimizerState adam(double lr, double beta1 = 0.9, double beta2 = 0.999);
};

/// One in-place update of `params` from `grads`. Accumulators are created
/// lazily on the first call. Throws numeric (before touching anything) if
/// any gradient component is non-finite.
void optimizer_step(OptimizerState& state, std::span<const std::span<double>> params,
                    std::span<const std::span<const double>> grads);

// ---------------------------------------------------------------------------
// Gradient checking

struct GradientCheckReport {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // central difference straddled a kink or a code switch
    std::size_t worst_index = 0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Loss evaluation for the checker. `signature` identifies the piecewise
/// region (activation signs, selected codes); components whose +h or -h
/// evaluation lands in a different region are skipped.
struct LossProbe {
    double loss = 0.0;
    std::uint64_t signature = 0;
};

/// Relative error used throughout: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Central differences over every entry of `params` against `analytic`
/// (same flattened order). `params` are restored afterwards.
GradientCheckReport check_gradients(const std::function<LossProbe()>& loss, std::span<const std::span<double>> params,
                                    std::span<const double> analytic, double h, double tolerance);

/// Gradient check of mlp_backward on loss = sum(output .* projection) for a
/// seeded random projection. If the input puts any hidden unit within 1e-7
/// of the kink, it is shifted by a seeded offset first.
GradientCheckReport finite_difference_check(MlpParams& params, const Tensor& input, double tolerance,
                                            std::uint64_t seed = 0, double h = 1e-5);

/// Hash of the sign pattern of all hidden pre-activations.
std::uint64_t activation_signature(const MlpCache& cache, std::uint64_t h = 0);

}  // namespace qposer
