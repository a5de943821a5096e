// SPDX-License-Identifier: Apache-2.0
#include "qposer/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "qposer/error.hpp"

namespace qposer {

std::string to_string(Activation a) {
    switch (a) {
        case Activation::leaky_relu: return "leaky_relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}

Activation activation_from_string(const std::string& s) {
    if (s == "leaky_relu") return Activation::leaky_relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    fail(ErrorKind::invalid_argument, "unknown activation '" + s + "'");
}

void MlpSpec::validate() const {
    if (layer_widths.size() < 2) fail(ErrorKind::invalid_argument, "mlp needs at least input and output widths");
    for (int w : layer_widths) {
        if (w <= 0) fail(ErrorKind::invalid_argument, "mlp widths must be positive");
    }
}

std::size_t MlpSpec::parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 1; l < layer_widths.size(); ++l)
        n += static_cast<std::size_t>(layer_widths[l]) * (layer_widths[l - 1] + 1);
    return n;
}

MlpParams MlpParams::zeros(const MlpSpec& spec) {
    spec.validate();
    MlpParams p{spec, {}};
    for (std::size_t l = 1; l < spec.layer_widths.size(); ++l) {
        const int in = spec.layer_widths[l - 1], out = spec.layer_widths[l];
        p.layers.push_back({Tensor::Zero(out, in), Vector::Zero(out)});
    }
    return p;
}

MlpParams MlpParams::init(const MlpSpec& spec, Rng& rng) {
    MlpParams p = zeros(spec);
    for (auto& layer : p.layers) {
        const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
        double* w = layer.weight.data();
        for (Eigen::Index i = 0; i < layer.weight.size(); ++i) w[i] = rng.uniform(-limit, limit);
    }
    return p;
}

std::vector<std::span<double>> MlpParams::blocks() {
    std::vector<std::span<double>> out;
    for (auto& l : layers) {
        out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
        out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
    return out;
}

std::vector<std::span<const double>> MlpParams::blocks() const {
    std::vector<std::span<const double>> out;
    for (const auto& l : layers) {
        out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
        out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    }
    return out;
}

namespace {

void activate_inplace(Tensor& t, Activation a) {
    switch (a) {
        case Activation::leaky_relu:
            t = t.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
            break;
        case Activation::tanh:
            t = t.array().tanh().matrix();
            break;
        case Activation::identity:
            break;
    }
}

// g *= f'(pre)
void activation_backward_inplace(Tensor& g, const Tensor& pre, Activation a) {
    switch (a) {
        case Activation::leaky_relu:
            g = g.binaryExpr(pre, [](double gv, double pv) { return pv > 0.0 ? gv : kLeakySlope * gv; });
            break;
        case Activation::tanh:
            g = g.binaryExpr(pre, [](double gv, double pv) {
                const double t = std::tanh(pv);
                return gv * (1.0 - t * t);
            });
            break;
        case Activation::identity:
            break;
    }
}

void check_input(const MlpParams& params, const Tensor& input) {
    if (params.layers.empty()) fail(ErrorKind::invalid_argument, "mlp has no layers");
    if (input.cols() != params.spec.input_width())
        fail(ErrorKind::invalid_argument, "mlp input width " + std::to_string(input.cols()) + " != " +
                                              std::to_string(params.spec.input_width()));
}

}  // namespace

MlpOutput mlp_forward(const MlpParams& params, const Tensor& input) {
    check_input(params, input);
    MlpOutput out;
    out.cache.params = &params;
    const std::size_t n = params.layers.size();
    out.cache.inputs.reserve(n);
    out.cache.preactivations.reserve(n);
    Tensor x = input;
    for (std::size_t l = 0; l < n; ++l) {
        const auto& layer = params.layers[l];
        Tensor pre = x * layer.weight.transpose();
        pre.rowwise() += layer.bias.transpose();
        out.cache.inputs.push_back(std::move(x));
        x = pre;
        if (l + 1 < n) activate_inplace(x, params.spec.activation);
        out.cache.preactivations.push_back(std::move(pre));
    }
    out.output = std::move(x);
    return out;
}

Tensor mlp_apply(const MlpParams& params, const Tensor& input) {
    check_input(params, input);
    Tensor x = input;
    const std::size_t n = params.layers.size();
    for (std::size_t l = 0; l < n; ++l) {
        Tensor pre = x * params.layers[l].weight.transpose();
        pre.rowwise() += params.layers[l].bias.transpose();
        if (l + 1 < n) activate_inplace(pre, params.spec.activation);
        x = std::move(pre);
    }
    return x;
}

Tensor mlp_backward_accumulate(const MlpParams& params, const MlpCache& cache, const Tensor& upstream, MlpGrads& grads) {
    const std::size_t n = params.layers.size();
    if (cache.params != &params || cache.inputs.size() != n || cache.preactivations.size() != n)
        fail(ErrorKind::invalid_argument, "mlp_backward: cache does not belong to these parameters");
    if (upstream.rows() != cache.inputs.front().rows() || upstream.cols() != params.spec.output_width())
        fail(ErrorKind::invalid_argument, "mlp_backward: upstream gradient shape mismatch");
    if (grads.layers.size() != n) fail(ErrorKind::invalid_argument, "mlp_backward: gradient buffer shape mismatch");

    Tensor g = upstream;
    for (std::size_t l = n; l-- > 0;) {
        if (l + 1 < n) activation_backward_inplace(g, cache.preactivations[l], params.spec.activation);
        grads.layers[l].weight.noalias() += g.transpose() * cache.inputs[l];
        grads.layers[l].bias.noalias() += g.colwise().sum().transpose();
        g = g * params.layers[l].weight;
    }
    return g;
}

MlpBackward mlp_backward(const MlpParams& params, const MlpCache& cache, const Tensor& upstream) {
    MlpBackward out{Tensor(), MlpParams::zeros(params.spec)};
    out.input_grad = mlp_backward_accumulate(params, cache, upstream, out.param_grads);
    return out;
}

double min_kink_distance(const MlpCache& cache) {
    if (!cache.params || cache.params->spec.activation != Activation::leaky_relu) return std::numeric_limits<double>::infinity();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l + 1 < cache.preactivations.size(); ++l)
        best = std::min(best, cache.preactivations[l].cwiseAbs().minCoeff());
    return best;
}

std::uint64_t activation_signature(const MlpCache& cache, std::uint64_t h) {
    if (!cache.params || cache.params->spec.activation != Activation::leaky_relu) return h;
    for (std::size_t l = 0; l + 1 < cache.preactivations.size(); ++l) {
        const Tensor& pre = cache.preactivations[l];
        for (Eigen::Index i = 0; i < pre.size(); ++i) {
            h ^= pre.data()[i] > 0.0 ? 0x9E3779B97F4A7C15ULL : 0x2545F4914F6CDD1DULL;
            h = mix64(h + static_cast<std::uint64_t>(i));
        }
    }
    return h;
}

// ---------------------------------------------------------------------------

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adaptive_moments"; }

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd" || s == "sgd_momentum") return OptimizerKind::sgd_momentum;
    if (s == "adam" || s == "adaptive_moments") return OptimizerKind::adaptive_moments;
    fail(ErrorKind::invalid_argument, "unknown optimizer '" + s + "'");
}

OptimizerState OptimizerState::sgd(double lr, double momentum) {
    OptimizerState s;
    s.kind = OptimizerKind::sgd_momentum;
    s.learning_rate = lr;
    s.momentum = momentum;
    return s;
}

OptimizerState OptimizerState::adam(double lr, double beta1, double beta2) {
    OptimizerState s;
    s.kind = OptimizerKind::adaptive_moments;
    s.learning_rate = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    return s;
}

void optimizer_step(OptimizerState& state, std::span<const std::span<double>> params,
                    std::span<const std::span<const double>> grads) {
    if (params.size() != grads.size()) fail(ErrorKind::invalid_argument, "optimizer: parameter/gradient block count mismatch");
    for (std::size_t b = 0; b < params.size(); ++b) {
        if (params[b].size() != grads[b].size()) fail(ErrorKind::invalid_argument, "optimizer: block size mismatch");
        for (double g : grads[b]) {
            if (!std::isfinite(g)) fail(ErrorKind::numeric, "non-finite update: gradient block " + std::to_string(b));
        }
    }
    const bool adaptive = state.kind == OptimizerKind::adaptive_moments;
    if (state.first_moment.empty()) {
        for (const auto& p : params) {
            state.first_moment.emplace_back(p.size(), 0.0);
            if (adaptive) state.second_moment.emplace_back(p.size(), 0.0);
        }
    }
    if (state.first_moment.size() != params.size() || (adaptive && state.second_moment.size() != params.size()))
        fail(ErrorKind::invalid_argument, "optimizer: accumulator shape mismatch");

    ++state.step_count;
    const double lr = state.learning_rate;
    if (!adaptive) {
        for (std::size_t b = 0; b < params.size(); ++b) {
            auto& v = state.first_moment[b];
            for (std::size_t i = 0; i < params[b].size(); ++i) {
                v[i] = state.momentum * v[i] + grads[b][i];
                params[b][i] -= lr * v[i];
            }
        }
        return;
    }
    const double t = static_cast<double>(state.step_count);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t b = 0; b < params.size(); ++b) {
        auto& m = state.first_moment[b];
        auto& v = state.second_moment[b];
        for (std::size_t i = 0; i < params[b].size(); ++i) {
            const double g = grads[b][i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            params[b][i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradientCheckReport check_gradients(const std::function<LossProbe()>& loss, std::span<const std::span<double>> params,
                                    std::span<const double> analytic, double h, double tolerance) {
    GradientCheckReport report;
    report.tolerance = tolerance;
    const std::uint64_t base = loss().signature;
    std::size_t flat = 0;
    for (const auto& block : params) {
        for (std::size_t i = 0; i < block.size(); ++i, ++flat) {
            if (flat >= analytic.size()) fail(ErrorKind::invalid_argument, "gradient check: analytic gradient too short");
            const double saved = block[i];
            block[i] = saved + h;
            const LossProbe plus = loss();
            block[i] = saved - h;
            const LossProbe minus = loss();
            block[i] = saved;
            if (plus.signature != base || minus.signature != base) {
                ++report.skipped;
                continue;
            }
            const double numeric = (plus.loss - minus.loss) / (2.0 * h);
            const double err = relative_error(analytic[flat], numeric);
            ++report.checked;
            if (err > report.max_relative_error) {
                report.max_relative_error = err;
                report.worst_index = flat;
            }
        }
    }
    if (flat != analytic.size()) fail(ErrorKind::invalid_argument, "gradient check: analytic gradient length mismatch");
    report.passed = report.checked > 0 && report.max_relative_error <= tolerance;
    return report;
}

GradientCheckReport finite_difference_check(MlpParams& params, const Tensor& input, double tolerance, std::uint64_t seed,
                                            double h) {
    if (params.parameter_count() > 10000) fail(ErrorKind::invalid_argument, "finite_difference_check: network too large");
    Rng rng = Rng::derive(seed, "gradcheck");
    Tensor x = input;
    for (int attempt = 0; attempt < 16; ++attempt) {
        if (min_kink_distance(mlp_forward(params, x).cache) >= 1e-7) break;
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += rng.uniform(-0.5, 0.5);
    }
    Tensor projection(x.rows(), params.spec.output_width());
    for (Eigen::Index i = 0; i < projection.size(); ++i) projection.data()[i] = rng.uniform(-1.0, 1.0);

    const MlpOutput fwd = mlp_forward(params, x);
    const MlpBackward bwd = mlp_backward(params, fwd.cache, projection);
    std::vector<double> analytic;
    for (const auto& blk : bwd.param_grads.blocks()) analytic.insert(analytic.end(), blk.begin(), blk.end());

    auto probe = [&]() {
        const MlpOutput o = mlp_forward(params, x);
        return LossProbe{o.output.cwiseProduct(projection).sum(), activation_signature(o.cache)};
    };
    const auto blocks = params.blocks();
    return check_gradients(probe, blocks, analytic, h, tolerance);
}

}  // namespace qposer
