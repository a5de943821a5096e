// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "qposer/data.hpp"
#include "qposer/error.hpp"
#include "test_support.hpp"

using namespace qposer;

namespace {

const Skeleton& body() {
    static const Skeleton s = Skeleton::body21();
    return s;
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out << bytes;
}

bool same_multiset(std::vector<Pose> a, std::vector<Pose> b) {
    auto less = [](const Pose& x, const Pose& y) { return x.flatten() < y.flatten(); };
    std::sort(a.begin(), a.end(), less);
    std::sort(b.begin(), b.end(), less);
    return a == b;
}

}  // namespace

TEST_CASE("manifold spec validation", "[data]") {
    ManifoldSpec spec;
    CHECK_NOTHROW(spec.validate(body()));
    spec.intrinsic_dim = 0;
    CHECK_THROWS_AS(spec.validate(body()), Error);
    spec.intrinsic_dim = 17;
    CHECK_THROWS_AS(spec.validate(body()), Error);
    spec = ManifoldSpec{};
    spec.joint_limit_deg.assign(21, 200.0);
    CHECK_THROWS_AS(spec.validate(body()), Error);
    spec.joint_limit_deg.assign(20, 90.0);
    CHECK_THROWS_AS(spec.validate(body()), Error);
    spec = ManifoldSpec{};
    spec.weight_decay = 0.0;
    CHECK_THROWS_AS(spec.validate(body()), Error);
    spec.weight_decay = 1.5;
    CHECK_THROWS_AS(spec.validate(body()), Error);

    const auto limits = ManifoldSpec::default_joint_limits(body());
    for (std::size_t j = 0; j < limits.size(); ++j) {
        const auto& name = body().joint_names[j];
        const bool stiff = name.rfind("spine", 0) == 0 || name == "neck" || name == "head";
        CHECK(limits[j] == (stiff ? 45.0 : 90.0));
    }
}

TEST_CASE("weight decay shrinks later intrinsic dimensions", "[data]") {
    ManifoldSpec flat, decayed;
    decayed.weight_decay = 0.5;
    const auto a = ManifoldParams::derive(flat, body());
    const auto b = ManifoldParams::derive(decayed, body());
    for (std::size_t j = 0; j < body().joint_count(); ++j) {
        double scale = 1.0;
        for (std::size_t k = 0; k < 6; ++k, scale *= 0.5) {
            CHECK(b.weight[j][k] == a.weight[j][k] * scale);
            CHECK(std::abs(b.weight[j][k]) <= decayed.weight_scale * scale);
            CHECK(b.omega[j][k] == a.omega[j][k]);
        }
    }
}

TEST_CASE("manifold origin with zero phases is the rest pose", "[data]") {
    ManifoldParams params = ManifoldParams::derive(ManifoldSpec{}, body());
    for (auto& row : params.phase) std::fill(row.begin(), row.end(), 0.0);
    const std::vector<double> u(6, 0.0);
    CHECK(params.pose_at(u, body().name) == rest_pose(body()));
}

TEST_CASE("manifold generation is deterministic and prefix stable", "[data]") {
    const ManifoldSpec spec{.seed = 5};
    const PoseDataset a = generate_manifold(spec, 300, body());
    const PoseDataset b = generate_manifold(spec, 300, body());
    const PoseDataset c = generate_manifold(spec, 100, body());
    CHECK(a.poses == b.poses);
    CHECK(a.content_hash() == b.content_hash());
    CHECK(std::equal(c.poses.begin(), c.poses.end(), a.poses.begin()));
    const PoseDataset other = generate_manifold(ManifoldSpec{.seed = 6}, 300, body());
    CHECK(other.content_hash() != a.content_hash());
    CHECK_THROWS_AS(generate_manifold(spec, 0, body()), Error);
}

TEST_CASE("generated joints respect their limits and invariants", "[data][property]") {
    const ManifoldSpec spec{.seed = 9};
    const ManifoldParams params = ManifoldParams::derive(spec, body());
    const PoseDataset ds = generate_manifold(spec, 2000, body());
    const auto limits = ManifoldSpec::default_joint_limits(body());
    for (const auto& p : ds.poses) {
        REQUIRE(satisfies_invariants(p, body()));
        for (std::size_t j = 0; j < p.size(); ++j) REQUIRE(geodesic_angle_deg(UnitQuaternion::identity(), p.joints[j]) <= limits[j] + 1e-9);
    }
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        std::vector<double> u(6);
        for (auto& x : u) x = rng.uniform(-1, 1);
        const auto theta = params.angles_at(u);
        for (std::size_t j = 0; j < theta.size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 6; ++k) s += params.weight[j][k] * std::sin(params.omega[j][k] * u[k] + params.phase[j][k]);
            REQUIRE(std::abs(theta[j] - params.limit_rad[j] * std::tanh(s)) <= 1e-12);
        }
    }
}

TEST_CASE("manifold is low dimensional", "[data][property]") {
    const PoseDataset ds = generate_manifold(ManifoldSpec{.seed = 3}, 4000, body());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(ds.size()), 84);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto f = ds.poses[i].flatten();
        for (int k = 0; k < 84; ++k) x(static_cast<Eigen::Index>(i), k) = f[static_cast<std::size_t>(k)];
    }
    const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(ds.size() - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd ev = eig.eigenvalues().reverse();
    const double top = ev.head(18).sum(), all = ev.sum();
    INFO("variance in 18 components: " << top / all);
    CHECK(top / all >= 0.95);
}

TEST_CASE("manifold distance", "[data][oracle]") {
    const PoseDataset ref = generate_manifold(ManifoldSpec{.seed = 4}, 500, body());
    CHECK(manifold_distance(ref.poses[17], ref) == 0.0);

    PoseDataset with_rest = ref;
    with_rest.poses.push_back(rest_pose(body()));
    CHECK(manifold_distance(rest_pose(body()), with_rest) == 0.0);

    Rng rng(2);
    for (int i = 0; i < 10; ++i) {
        const Pose p = test_support::random_pose(body(), rng);
        double best = 1e300;
        for (const auto& r : ref.poses) {
            double sum = 0.0;
            for (std::size_t j = 0; j < p.size(); ++j) sum += geodesic_angle_deg(p.joints[j], r.joints[j]);
            best = std::min(best, sum / 21.0);
        }
        CHECK(manifold_distance(p, ref) == best);
    }
    CHECK_THROWS_AS(manifold_distance(rest_pose(body()), std::span<const Pose>{}), Error);
}

TEST_CASE("split sizes and partition", "[data]") {
    const PoseDataset ds = generate_manifold(ManifoldSpec{}, 100, body());
    const SplitSpec s{0.8, 0.1, 0.1, 7};
    const Splits a = split(ds, s);
    CHECK(a.train.size() == 80);
    CHECK(a.val.size() == 10);
    CHECK(a.test.size() == 10);
    const Splits b = split(ds, s);
    CHECK(a.train.poses == b.train.poses);
    CHECK(a.test.poses == b.test.poses);

    std::vector<Pose> all = a.train.poses;
    all.insert(all.end(), a.val.poses.begin(), a.val.poses.end());
    all.insert(all.end(), a.test.poses.begin(), a.test.poses.end());
    CHECK(same_multiset(all, ds.poses));

    CHECK_THROWS_AS(split(ds, SplitSpec{0.5, 0.2, 0.2, 1}), Error);
    CHECK_THROWS_AS(split(ds, SplitSpec{1.0, 0.0, 0.0, 1}), Error);
    PoseDataset tiny = ds;
    tiny.poses.resize(9);
    CHECK_THROWS_AS(split(tiny, s), Error);
}

TEST_CASE("qpse round trip and size", "[data]") {
    const auto dir = test_support::scratch_dir("qpse");
    const PoseDataset ds = generate_manifold(ManifoldSpec{.seed = 8}, 10000, body());
    const auto path = dir / "poses.qpse";
    save_poses(path, ds);
    CHECK(std::filesystem::file_size(path) == 24u + 10000u * 21u * 4u * 4u);
    const std::string bytes = read_bytes(path);
    CHECK(bytes.substr(0, 4) == "QPSE");

    const PoseDataset back = load_poses(path, body());
    REQUIRE(back.size() == ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        REQUIRE(satisfies_invariants(back.poses[i], body()));
        for (std::size_t j = 0; j < 21; ++j)
            for (int k = 0; k < 4; ++k) REQUIRE(std::abs(back.poses[i].joints[j].components()[k] - ds.poses[i].joints[j].components()[k]) <= 1e-6);
    }
}

TEST_CASE("jsonl round trip", "[data]") {
    const auto dir = test_support::scratch_dir("jsonl");
    const PoseDataset ds = generate_manifold(ManifoldSpec{.seed = 8}, 50, body());
    const auto path = dir / "poses.jsonl";
    save_poses(path, ds);
    CHECK(format_for_path(path) == PoseFileFormat::jsonl);
    const PoseDataset back = load_poses(path, body());
    REQUIRE(back.size() == 50);
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < 21; ++j)
            for (int k = 0; k < 4; ++k) REQUIRE(std::abs(back.poses[i].joints[j].components()[k] - ds.poses[i].joints[j].components()[k]) <= 1e-6);
}

TEST_CASE("corrupt pose files are rejected", "[data]") {
    const auto dir = test_support::scratch_dir("corrupt");
    const PoseDataset ds = generate_manifold(ManifoldSpec{}, 20, body());
    const auto good = dir / "good.qpse";
    save_poses(good, ds);
    const std::string bytes = read_bytes(good);

    auto expect_format_error = [&](const std::string& content) {
        const auto p = dir / "bad.qpse";
        write_bytes(p, content);
        try {
            load_poses(p, body());
            FAIL("expected a format error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::format);
        }
    };
    expect_format_error("QPSX" + bytes.substr(4));
    expect_format_error(bytes.substr(0, bytes.size() - 3));
    expect_format_error(bytes.substr(0, 10));
    std::string nan_bytes = bytes;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan_bytes.data() + 24 + 16 * 5, &nan, 4);
    expect_format_error(nan_bytes);
    std::string version = bytes;
    version[4] = 2;
    expect_format_error(version);

    const Skeleton other = Skeleton::from_json(nlohmann::json::parse(
        R"({"name": "pair", "joints": [{"name": "a", "parent": null, "offset": [0,0,0], "part": "P"}, {"name": "b", "parent": "a", "offset": [0,1,0], "part": "P"}]})"));
    CHECK_THROWS_AS(load_poses(good, other), Error);
    CHECK_THROWS_AS(load_poses(dir / "missing.qpse", body()), Error);
}
