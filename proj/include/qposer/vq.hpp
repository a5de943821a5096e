// SPDX-License-Identifier: Apache-2.0
//
// Codebooks and vector quantization. Codebooks learn by exponential moving
// averages of their assigned encoder outputs; no gradient reaches them.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "qposer/numerics.hpp"
#include "qposer/rng.hpp"

namespace qposer {

struct Codebook {
    std::string id;
    Tensor codes;                            // K x d
    Vector ema_cluster_size;                 // K, >= 0
    Tensor ema_code_sum;                     // K x d
    std::vector<std::uint64_t> usage_count;  // assignments since the last reset_usage()

    /// Codes uniform in [-scale, scale]; EMA state warm-started at one
    /// pseudo-assignment per code.
    static Codebook random(std::string id, int size, int dim, Rng& rng, double scale = 1.0);

    int size() const { return static_cast<int>(codes.rows()); }
    int dim() const { return static_cast<int>(codes.cols()); }

    /// Sets codes from rows of `samples` by k-means++ seeding and resets the EMA state.
    void seed_from(const Tensor& samples, Rng& rng);

    void reset_usage();
    /// Fraction of codes with nonzero usage_count.
    double usage_fraction() const;
};

struct Quantized {
    int index = 0;
    Vector code;
    double distance2 = 0.0;
};

/// Nearest code by squared Euclidean distance, lowest index on ties.
/// Throws invalid_argument on dimension mismatch or non-finite input.
Quantized quantize(std::span<const double> z, const Codebook& cb);

/// Index-only variant for hot loops; same rule as quantize().
int nearest_code(const double* z, const Codebook& cb);

/// Gradient routed to the encoder output for a quantized slot: the upstream
/// gradient on z_q, unchanged. The codebook receives nothing on this path.
inline const Tensor& straight_through(const Tensor& upstream_on_zq) { return upstream_on_zq; }

/// Mean over rows of |z - z_q|^2.
double commitment_loss(const Tensor& z, const Tensor& zq);

/// d commitment_loss / d z with z_q held constant.
Tensor commitment_grad(const Tensor& z, const Tensor& zq);

struct Assignment {
    int index = 0;
    std::span<const double> z;
};

constexpr double kDefaultEmaDecay = 0.99;
constexpr double kDefaultEmaEpsilon = 1e-5;

/// cluster_size <- decay*cluster_size + (1-decay)*count
/// code_sum     <- decay*code_sum     + (1-decay)*sum of assigned z
/// code         <- code_sum / laplace(cluster_size)
/// where laplace(n_i) = (n_i + eps) / (N + K*eps) * N, N = sum n_i.
void ema_update(Codebook& cb, std::span<const Assignment> assignments, double decay, double epsilon);

/// Replaces codes with usage_count < min_usage by uniformly drawn rows of
/// `batch` and resets their EMA accumulators. Returns the number replaced.
int reseed_dead_codes(Codebook& cb, const Tensor& batch, std::uint64_t min_usage, Rng& rng);

inline int sample_code(const Codebook& cb, Rng& rng) { return static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cb.size()))); }

}  // namespace qposer
