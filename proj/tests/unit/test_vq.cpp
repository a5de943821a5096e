// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "qposer/error.hpp"
#include "qposer/vq.hpp"

using namespace qposer;

namespace {

std::vector<std::vector<double>> rows_of(const Tensor& t) {
    std::vector<std::vector<double>> out;
    for (Eigen::Index r = 0; r < t.rows(); ++r) out.emplace_back(t.row(r).data(), t.row(r).data() + t.cols());
    return out;
}

std::vector<double> random_vec(int d, Rng& rng, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (auto& x : v) x = rng.uniform(-scale, scale);
    return v;
}

// Two clusters at (+1,+1) and (-1,-1) with small jitter.
Tensor two_cluster_batch(int n, Rng& rng, double jitter = 0.1) {
    Tensor t(n, 2);
    for (int i = 0; i < n; ++i) {
        const double c = (i % 2 == 0) ? 1.0 : -1.0;
        t(i, 0) = c + rng.uniform(-jitter, jitter);
        t(i, 1) = c + rng.uniform(-jitter, jitter);
    }
    return t;
}

std::vector<Assignment> assign_all(const Codebook& cb, const Tensor& batch) {
    std::vector<Assignment> a;
    for (Eigen::Index r = 0; r < batch.rows(); ++r)
        a.push_back({nearest_code(batch.row(r).data(), cb), std::span<const double>(batch.row(r).data(), static_cast<std::size_t>(batch.cols()))});
    return a;
}

}  // namespace

TEST_CASE("quantize exact code and tie-break", "[vq]") {
    Rng rng(1);
    Codebook cb = Codebook::random("c", 8, 3, rng);
    const Vector c5 = cb.codes.row(5).transpose();
    const Quantized q = quantize(std::span<const double>(c5.data(), 3), cb);
    CHECK(q.index == 5);
    CHECK(q.distance2 == 0.0);
    CHECK(q.code == c5);

    Codebook tie = Codebook::random("t", 6, 2, rng);
    tie.codes.setConstant(10.0);
    tie.codes.row(2) << 1.0, 0.0;
    tie.codes.row(5) << -1.0, 0.0;
    const std::vector<double> origin{0.0, 0.0};
    CHECK(quantize(origin, tie).index == 2);
}

TEST_CASE("quantize rejects bad input", "[vq]") {
    Rng rng(2);
    const Codebook cb = Codebook::random("c", 4, 3, rng);
    const std::vector<double> wrong{1.0, 2.0};
    CHECK_THROWS_AS(quantize(wrong, cb), Error);
    const std::vector<double> bad{1.0, NAN, 0.0};
    CHECK_THROWS_AS(quantize(bad, cb), Error);
}

TEST_CASE("quantize matches an exhaustive scan", "[vq][oracle]") {
    Rng rng(3);
    const Codebook cb = Codebook::random("c", 32, 16, rng);
    const auto codes = rows_of(cb.codes);
    for (int i = 0; i < 1000; ++i) {
        const auto z = random_vec(16, rng, 1.2);
        const Quantized q = quantize(z, cb);
        REQUIRE(q.index == oracle::brute_force_nearest(z, codes));
        REQUIRE(nearest_code(z.data(), cb) == q.index);
    }
}

TEST_CASE("quantize is idempotent and never beaten by another code", "[vq][property]") {
    Rng rng(4);
    const Codebook cb = Codebook::random("c", 16, 8, rng);
    for (int i = 0; i < 500; ++i) {
        const auto z = random_vec(8, rng);
        const Quantized q = quantize(z, cb);
        REQUIRE(quantize(std::span<const double>(q.code.data(), 8), cb).index == q.index);
        for (int k = 0; k < cb.size(); ++k) {
            double d = 0.0;
            for (int j = 0; j < 8; ++j) d += std::pow(z[static_cast<std::size_t>(j)] - cb.codes(k, j), 2);
            REQUIRE(q.distance2 <= d);
        }
    }
}

TEST_CASE("straight-through passes the gradient unchanged", "[vq]") {
    Rng rng(5);
    Tensor g(4, 3);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform(-1, 1);
    CHECK(straight_through(g) == g);
    CHECK(&straight_through(g) == &g);
    const Tensor zero = Tensor::Zero(2, 2);
    CHECK(straight_through(zero).isZero());
}

TEST_CASE("commitment loss", "[vq]") {
    Tensor z(1, 3), zq(1, 3);
    z << 0.5, 1.0, -2.0;
    CHECK(commitment_loss(z, z) == 0.0);
    zq = z;
    zq(0, 1) += 1.0;
    CHECK(commitment_loss(z, zq) == 1.0);
    CHECK_THROWS_AS(commitment_loss(z, Tensor::Zero(2, 3)), Error);

    Rng rng(6);
    Tensor a(20, 8), b(20, 8);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        a.data()[i] = rng.uniform(-1, 1);
        b.data()[i] = rng.uniform(-1, 1);
    }
    double sum = 0.0;
    for (int r = 0; r < 20; ++r)
        for (int c = 0; c < 8; ++c) sum += (a(r, c) - b(r, c)) * (a(r, c) - b(r, c));
    CHECK(std::abs(commitment_loss(a, b) - sum / 20.0) <= 1e-12);

    // Analytic gradient against central differences.
    const Tensor g = commitment_grad(a, b);
    for (int r = 0; r < 20; r += 7) {
        for (int c = 0; c < 8; c += 3) {
            Tensor p = a, m = a;
            p(r, c) += 1e-6;
            m(r, c) -= 1e-6;
            CHECK(g(r, c) == Catch::Approx((commitment_loss(p, b) - commitment_loss(m, b)) / 2e-6).epsilon(1e-6));
        }
    }
}

TEST_CASE("ema update without assignments barely moves warm codes", "[vq]") {
    Rng rng(7);
    Codebook cb = Codebook::random("c", 8, 4, rng);
    for (int i = 0; i < 50; ++i) {
        const Tensor batch = cb.codes;
        ema_update(cb, assign_all(cb, batch), 0.99, 1e-5);
    }
    const Tensor before = cb.codes;
    ema_update(cb, {}, 0.99, 1e-5);
    CHECK((cb.codes - before).cwiseAbs().maxCoeff() < 1e-9);
    CHECK_THROWS_AS(ema_update(cb, {}, 1.0, 1e-5), Error);
    CHECK_THROWS_AS(ema_update(cb, {}, 0.0, 1e-5), Error);
}

TEST_CASE("ema update with tiny decay jumps to the batch mean", "[vq]") {
    Rng rng(8);
    Codebook cb = Codebook::random("c", 4, 3, rng);
    const std::vector<double> v{0.3, -0.7, 1.1};
    std::vector<Assignment> a(16, Assignment{2, v});
    ema_update(cb, a, 1e-12, 1e-12);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(cb.codes(2, j) - v[static_cast<std::size_t>(j)]) < 1e-9);

    // Default smoothing keeps the code within (K-1)*eps/N relative of v.
    Codebook warm = Codebook::random("w", 4, 3, rng);
    ema_update(warm, a, 1e-12, kDefaultEmaEpsilon);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(warm.codes(2, j) - v[static_cast<std::size_t>(j)]) < 1e-5);
    CHECK(cb.usage_count[2] == 16);
}

TEST_CASE("ema codes converge to the two cluster means", "[vq][oracle]") {
    Rng rng(9);
    Codebook cb = Codebook::random("c", 2, 2, rng, 0.2);
    cb.codes.row(0) << 0.3, 0.2;
    cb.codes.row(1) << -0.2, -0.4;
    Tensor all(0, 2);
    for (int step = 0; step < 200; ++step) {
        const Tensor batch = two_cluster_batch(64, rng);
        ema_update(cb, assign_all(cb, batch), 0.9, 1e-5);
        REQUIRE(cb.ema_cluster_size.minCoeff() >= 0.0);
        REQUIRE(cb.codes.allFinite());
    }
    // Cluster means are (+1,+1) and (-1,-1) by construction.
    CHECK(std::abs(cb.codes(0, 0) - 1.0) < 0.05);
    CHECK(std::abs(cb.codes(0, 1) - 1.0) < 0.05);
    CHECK(std::abs(cb.codes(1, 0) + 1.0) < 0.05);
    CHECK(std::abs(cb.codes(1, 1) + 1.0) < 0.05);
}

TEST_CASE("reseeding leaves a fully used book alone", "[vq]") {
    Rng rng(10);
    Codebook cb = Codebook::random("c", 4, 2, rng);
    for (auto& u : cb.usage_count) u = 3;
    const Tensor before = cb.codes;
    CHECK(reseed_dead_codes(cb, Tensor::Ones(5, 2), 1, rng) == 0);
    CHECK(cb.codes == before);
}

TEST_CASE("reseeding replaces an unused code with batch data", "[vq]") {
    Rng rng(11);
    Codebook cb = Codebook::random("c", 4, 2, rng);
    cb.usage_count = {5, 0, 2, 1};
    Tensor batch(6, 2);
    batch.rowwise() = Eigen::RowVector2d(0.25, -0.5);
    CHECK(reseed_dead_codes(cb, batch, 1, rng) == 1);
    CHECK(cb.codes(1, 0) == 0.25);
    CHECK(cb.codes(1, 1) == -0.5);
    CHECK_THROWS_AS(reseed_dead_codes(cb, Tensor(0, 2), 1, rng), Error);
}

TEST_CASE("reseeding rescues a book initialized far from the data", "[vq]") {
    Rng rng(12);
    Codebook cb = Codebook::random("c", 8, 2, rng, 0.1);
    for (int k = 0; k < 8; ++k) cb.codes.row(k) << 50.0 + k, 50.0;
    cb.ema_code_sum = cb.codes;
    for (int epoch = 0; epoch < 5; ++epoch) {
        cb.reset_usage();
        Tensor last;
        for (int step = 0; step < 10; ++step) {
            last = two_cluster_batch(64, rng, 0.5);
            ema_update(cb, assign_all(cb, last), 0.99, 1e-5);
        }
        reseed_dead_codes(cb, last, 1, rng);
    }
    cb.reset_usage();
    const Tensor probe = two_cluster_batch(2000, rng, 0.5);
    ema_update(cb, assign_all(cb, probe), 0.99, 1e-5);
    CHECK(cb.usage_fraction() >= 0.5);
}

TEST_CASE("seeding from samples picks distinct rows", "[vq]") {
    Rng rng(13);
    Codebook cb = Codebook::random("c", 4, 2, rng);
    Tensor samples(4, 2);
    samples << 0, 0, 1, 0, 0, 1, 1, 1;
    cb.seed_from(samples, rng);
    std::vector<int> hits(4, 0);
    for (int k = 0; k < 4; ++k)
        for (int r = 0; r < 4; ++r)
            if (cb.codes.row(k) == samples.row(r)) ++hits[static_cast<std::size_t>(r)];
    CHECK(hits == std::vector<int>{1, 1, 1, 1});
}

TEST_CASE("code sampling", "[vq]") {
    Rng rng(14);
    const Codebook one = Codebook::random("one", 1, 2, rng);
    for (int i = 0; i < 100; ++i) CHECK(sample_code(one, rng) == 0);

    const Codebook cb = Codebook::random("c", 8, 2, rng);
    Rng r1(99), r2(99);
    for (int i = 0; i < 100; ++i) REQUIRE(sample_code(cb, r1) == sample_code(cb, r2));

    std::vector<int> counts(8, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(sample_code(cb, rng))];
    const double p = 1.0 / 8.0, sigma = std::sqrt(n * p * (1 - p));
    for (int c : counts) CHECK(std::abs(c - n * p) <= 3.0 * sigma);
}
