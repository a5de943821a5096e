// SPDX-License-Identifier: Apache-2.0
#include "qposer/vq.hpp"

#include <cmath>
#include <limits>

#include "qposer/error.hpp"

namespace qposer {

Codebook Codebook::random(std::string id, int size, int dim, Rng& rng, double scale) {
    if (size < 1 || dim < 1) fail(ErrorKind::invalid_argument, "codebook " + id + ": size and dimension must be >= 1");
    Codebook cb;
    cb.id = std::move(id);
    cb.codes.resize(size, dim);
    for (Eigen::Index i = 0; i < cb.codes.size(); ++i) cb.codes.data()[i] = rng.uniform(-scale, scale);
    cb.ema_cluster_size = Vector::Ones(size);
    cb.ema_code_sum = cb.codes;
    cb.usage_count.assign(static_cast<std::size_t>(size), 0);
    return cb;
}

void Codebook::seed_from(const Tensor& samples, Rng& rng) {
    if (samples.rows() == 0 || samples.cols() != codes.cols()) fail(ErrorKind::invalid_argument, "codebook seeding: bad sample shape");
    const Eigen::Index n = samples.rows();
    std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    Eigen::Index pick = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
    for (int k = 0; k < size(); ++k) {
        codes.row(k) = samples.row(pick);
        double total = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) {
            d2[r] = std::min(d2[r], (samples.row(r) - codes.row(k)).squaredNorm());
            total += d2[r];
        }
        if (k + 1 == size()) break;
        if (total <= 0.0) {
            pick = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n)));
            continue;
        }
        double target = rng.uniform01() * total;
        pick = n - 1;
        for (Eigen::Index r = 0; r < n; ++r) {
            target -= d2[r];
            if (target < 0.0) {
                pick = r;
                break;
            }
        }
    }
    ema_cluster_size = Vector::Ones(size());
    ema_code_sum = codes;
    reset_usage();
}

void Codebook::reset_usage() { usage_count.assign(static_cast<std::size_t>(size()), 0); }

double Codebook::usage_fraction() const {
    int used = 0;
    for (auto u : usage_count) used += u > 0 ? 1 : 0;
    return size() > 0 ? static_cast<double>(used) / size() : 0.0;
}

int nearest_code(const double* z, const Codebook& cb) {
    const int k = cb.size(), d = cb.dim();
    int best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
        const double* c = cb.codes.data() + static_cast<std::ptrdiff_t>(i) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            const double diff = z[j] - c[j];
            s += diff * diff;
        }
        if (s < best_d2) {
            best_d2 = s;
            best = i;
        }
    }
    return best;
}

Quantized quantize(std::span<const double> z, const Codebook& cb) {
    if (static_cast<int>(z.size()) != cb.dim()) fail(ErrorKind::invalid_argument, "quantize: dimension mismatch with codebook " + cb.id);
    for (double v : z) {
        if (!std::isfinite(v)) fail(ErrorKind::invalid_argument, "quantize: non-finite input");
    }
    Quantized q;
    q.index = nearest_code(z.data(), cb);
    q.code = cb.codes.row(q.index).transpose();
    double s = 0.0;
    for (int j = 0; j < cb.dim(); ++j) {
        const double diff = z[j] - q.code[j];
        s += diff * diff;
    }
    q.distance2 = s;
    return q;
}

double commitment_loss(const Tensor& z, const Tensor& zq) {
    if (z.rows() != zq.rows() || z.cols() != zq.cols()) fail(ErrorKind::invalid_argument, "commitment_loss: length mismatch");
    if (z.rows() == 0) return 0.0;
    return (z - zq).squaredNorm() / static_cast<double>(z.rows());
}

Tensor commitment_grad(const Tensor& z, const Tensor& zq) {
    if (z.rows() != zq.rows() || z.cols() != zq.cols()) fail(ErrorKind::invalid_argument, "commitment_grad: length mismatch");
    if (z.rows() == 0) return Tensor::Zero(0, z.cols());
    return (2.0 / static_cast<double>(z.rows())) * (z - zq);
}

void ema_update(Codebook& cb, std::span<const Assignment> assignments, double decay, double epsilon) {
    if (!(decay > 0.0 && decay < 1.0)) fail(ErrorKind::invalid_argument, "ema_update: decay must lie in (0, 1)");
    if (!(epsilon >= 0.0)) fail(ErrorKind::invalid_argument, "ema_update: epsilon must be non-negative");
    const int k = cb.size(), d = cb.dim();
    Vector counts = Vector::Zero(k);
    Tensor sums = Tensor::Zero(k, d);
    for (const auto& a : assignments) {
        if (a.index < 0 || a.index >= k || static_cast<int>(a.z.size()) != d)
            fail(ErrorKind::invalid_argument, "ema_update: bad assignment for codebook " + cb.id);
        counts[a.index] += 1.0;
        for (int j = 0; j < d; ++j) sums(a.index, j) += a.z[j];
    }
    cb.ema_cluster_size = decay * cb.ema_cluster_size + (1.0 - decay) * counts;
    cb.ema_code_sum = decay * cb.ema_code_sum + (1.0 - decay) * sums;
    const double total = cb.ema_cluster_size.sum();
    for (int i = 0; i < k; ++i) {
        const double smoothed = (cb.ema_cluster_size[i] + epsilon) / (total + k * epsilon) * total;
        if (smoothed > 0.0) cb.codes.row(i) = cb.ema_code_sum.row(i) / smoothed;
        cb.usage_count[static_cast<std::size_t>(i)] += static_cast<std::uint64_t>(counts[i]);
    }
}

int reseed_dead_codes(Codebook& cb, const Tensor& batch, std::uint64_t min_usage, Rng& rng) {
    if (batch.rows() == 0 || batch.cols() != cb.dim()) fail(ErrorKind::invalid_argument, "reseed_dead_codes: bad batch shape");
    int replaced = 0;
    for (int i = 0; i < cb.size(); ++i) {
        if (cb.usage_count[static_cast<std::size_t>(i)] >= min_usage) continue;
        const auto r = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(batch.rows())));
        cb.codes.row(i) = batch.row(r);
        cb.ema_cluster_size[i] = 1.0;
        cb.ema_code_sum.row(i) = batch.row(r);
        ++replaced;
    }
    return replaced;
}

}  // namespace qposer
