// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "model_fixtures.hpp"
#include "oracles.hpp"
#include "qposer/eval.hpp"
#include "qposer/json_io.hpp"
#include "qposer/run.hpp"
#include "qposer/service.hpp"
#include "test_support.hpp"

using namespace qposer;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;
int unexpected = 0;
std::vector<std::string> known_failures;

void report(const std::string& name, const Outcome& o) {
    const bool known = std::find(known_failures.begin(), known_failures.end(), name) != known_failures.end();
    const char* note = known ? (o.pass ? "  [listed as known failure but passed]" : "  [known failure]") : "";
    std::printf("%s  %-26s %s%s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), note);
    std::fflush(stdout);
    failures += !o.pass;
    unexpected += o.pass == known;
}

void run(const std::string& name, const std::function<Outcome()>& body) {
    try {
        report(name, body());
    } catch (const std::exception& e) {
        report(name, {false, std::string("error: ") + e.what()});
    }
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

// ---------------------------------------------------------------------------

Outcome gradients() {
    const auto t0 = Clock::now();
    const Skeleton s = test_support::tiny_skeleton();
    Rng rng(20);
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    bool all = true;
    for (int config = 0; config < 20; ++config) {
        PartLayout l;
        l.d_code = 2 + static_cast<int>(rng.uniform_index(3));
        const int ka = 2 + static_cast<int>(rng.uniform_index(4)), kb = 2 + static_cast<int>(rng.uniform_index(4));
        const int globals = static_cast<int>(rng.uniform_index(3));
        l.codebooks = {{"a", ka}, {"b", kb}};
        l.parts = {{"A", 1 + static_cast<int>(rng.uniform_index(2)), "a", s.joints_of_part(0)},
                   {"B", 1 + static_cast<int>(rng.uniform_index(2)), "b", s.joints_of_part(1)}};
        if (globals > 0) {
            l.codebooks.push_back({"g", 2 + static_cast<int>(rng.uniform_index(3))});
            l.global_head_count = globals;
            l.global_codebook_id = "g";
        }
        HiddenSpec h;
        h.widths.assign(1 + rng.uniform_index(2), 0);
        for (int& w : h.widths) w = 3 + static_cast<int>(rng.uniform_index(5));
        h.activation = rng.uniform_index(2) == 0 ? Activation::leaky_relu : Activation::tanh;
        QPoserModel m = build_model(l, s, h, 100 + static_cast<std::uint64_t>(config));

        std::vector<Pose> batch;
        const auto n = 2 + rng.uniform_index(3);
        for (std::uint64_t i = 0; i < n; ++i) batch.push_back(test_support::random_pose(s, rng));
        const Tensor x = poses_to_matrix(batch);
        const double lambda = rng.uniform(0.1, 2.0);
        const LossResult r = loss_and_grads(m, x, lambda);
        const QuantizationAnchor anchor = anchor_of(m, r);
        const auto analytic = r.grads.flatten();
        auto params = parameter_blocks(m);
        auto probe = [&]() {
            const LossResult p = loss_and_grads(m, x, lambda, false, &anchor);
            return LossProbe{p.total, p.signature};
        };
        const auto g = check_gradients(probe, params, analytic, 1e-5, 1e-4);
        worst = std::max(worst, g.max_relative_error);
        checked += g.checked;
        skipped += g.skipped;
        all = all && g.passed;
    }
    const double secs = seconds_since(t0);
    return {all && secs <= 60.0,
            fmt::format("20 configs, {} components ({} skipped at kinks), max rel err {:.2e} (tol 1e-4), {:.1f} s (limit 60 s)", checked, skipped,
                        worst, secs)};
}

Outcome quantization() {
    const auto t0 = Clock::now();
    Rng rng(21);
    std::size_t mismatches = 0, ties = 0;
    constexpr int kQueries = 100000;
    for (int q = 0; q < kQueries; ++q) {
        const int k = 1 + static_cast<int>(rng.uniform_index(32));
        const int d = 1 + static_cast<int>(rng.uniform_index(16));
        Codebook cb = Codebook::random("q", k, d, rng, 1.0);
        std::vector<double> z(static_cast<std::size_t>(d));
        for (double& v : z) v = rng.uniform(-1.0, 1.0);
        if (k > 1 && q % 4 == 0) {
            // Engineered tie: a duplicated row, or a pair mirrored through z.
            const auto i = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(k)));
            auto j = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(k - 1)));
            if (j >= i) ++j;
            if (q % 8 == 0) {
                cb.codes.row(j) = cb.codes.row(i);
            } else {
                for (int c = 0; c < d; ++c) z[static_cast<std::size_t>(c)] = 0.0;
                cb.codes.row(j) = -cb.codes.row(i);
            }
            ++ties;
        }
        std::vector<std::vector<double>> rows(static_cast<std::size_t>(k), std::vector<double>(static_cast<std::size_t>(d)));
        for (int r = 0; r < k; ++r)
            for (int c = 0; c < d; ++c) rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] = cb.codes(r, c);
        mismatches += nearest_code(z.data(), cb) != oracle::brute_force_nearest(z, rows);
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs <= 10.0,
            fmt::format("{} queries ({} engineered ties), {} mismatches (tol 0), {:.1f} s (limit 10 s)", kQueries, ties, mismatches, secs)};
}

Outcome geometry() {
    const Skeleton s = Skeleton::body21();
    Rng rng(22);
    double angle_err = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const UnitQuaternion a = test_support::random_quaternion(rng), b = test_support::random_quaternion(rng);
        angle_err = std::max(angle_err, std::abs(geodesic_angle_deg(a, b) - oracle::trace_angle_deg(a.components(), b.components())));
    }
    double bone_err = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto pos = forward_kinematics(test_support::random_pose(s, rng), s);
        for (std::size_t j = 0; j < s.joint_count(); ++j) {
            const int p = s.parent_index[j];
            if (p < 0) continue;
            const auto& o = s.bone_offset[j];
            const auto& a = pos[j];
            const auto& b = pos[static_cast<std::size_t>(p)];
            const double len = std::sqrt(o[0] * o[0] + o[1] * o[1] + o[2] * o[2]);
            const double got = std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
            bone_err = std::max(bone_err, std::abs(got - len));
        }
    }
    return {angle_err <= 1e-6 && bone_err <= 1e-6,
            fmt::format("geodesic vs trace max {:.2e} deg (tol 1e-6) on 1000 pairs, bone length max {:.2e} m (tol 1e-6) on 1000 poses", angle_err,
                        bone_err)};
}

// ---------------------------------------------------------------------------

struct DeskRun {
    RunConfig cfg;
    PoseDataset data;
    Splits splits;
    TrainState state;
    fs::path checkpoint;
    double train_seconds = 0.0;
};

Outcome desk_training(DeskRun& run, const fs::path& work, const fs::path& cli) {
    const double recon = eval_reconstruction(run.state.model, run.splits.test.poses).summary.mean;

    const fs::path repeat = work / "desk_repeat.qpck";
    const std::string cmd = quoted(cli) + " train --data " + quoted(work / "desk.qpse") + " --config " + quoted(work / "desk.json") +
                            " --out-checkpoint " + quoted(repeat) + " 2>/dev/null";
    const bool ran = std::system(cmd.c_str()) == 0;
    const bool identical = ran && read_file(run.checkpoint) == read_file(repeat);
    return {recon <= 5.0 && run.train_seconds <= 600.0 && identical,
            fmt::format("test MPJAE {:.3f} deg (limit 5.0) over {} poses, {:.0f} s (limit 600 s), repeat run via CLI {}", recon,
                        run.splits.test.size(), run.train_seconds, identical ? "bitwise identical" : "DIFFERS")};
}

Outcome escalated(const DeskRun& run) {
    const auto t0 = Clock::now();
    const auto& m = run.state.model;
    const auto& test = run.splits.test.poses;
    const PerPoseMetric k50 = eval_escalated(m, test, 50);
    std::vector<double> e50, e1000;
    for (const auto& p : test) {
        const auto errors = iterate_roundtrip(m, p, 1000);
        e50.push_back(errors[49] - errors[0]);
        e1000.push_back(errors.back() - errors[0]);
    }
    const double mean50 = k50.summary.mean;
    const double mean1000 = summarize(e1000).mean;
    const bool consistent = summarize(e50).mean == mean50;
    const double secs = seconds_since(t0);
    return {consistent && mean50 <= 0.5 && std::abs(mean1000 - mean50) <= 0.2 && secs <= 300.0,
            fmt::format("k=50 mean {:.4f} deg (limit 0.5), k=1000 mean {:.4f}, |diff| {:.4f} (limit 0.2), {} poses, {:.0f} s (limit 300 s)",
                        mean50, mean1000, std::abs(mean1000 - mean50), test.size(), secs)};
}

Outcome ablation(const DeskRun& run) {
    const auto t0 = Clock::now();
    AblationSettings settings;
    settings.train = run.cfg.train;
    settings.hidden = run.cfg.hidden;
    settings.model_seed = run.cfg.model_seed;
    const auto rows = run_ablation(default_ablation_variants(Skeleton::body21()), run.splits, settings);
    Rng rng = Rng::derive(0, "modify");
    const LocalModReport desk = eval_local_modification(run.state.model, run.splits.test.poses, rng, 200);
    const double one = rows[0].reconstruction.mean, four = rows[1].reconstruction.mean;
    const double off_shift = rows[2].embodied_shift.mean;
    const double on_shift = desk.embodied_shift.mean;
    return {one > four && off_shift == 0.0 && on_shift > 0.5 && desk.locality_rate == 1.0,
            fmt::format("recon 1 head {:.3f} > 4 heads {:.3f}; shift global-off {:.4f} (must be 0), desk {:.3f} deg (limit > 0.5), locality {:.2f}; "
                        "{} steps each, {:.0f} s",
                        one, four, off_shift, on_shift, desk.locality_rate, settings.train.steps, seconds_since(t0))};
}

std::span<const Pose> reference_of(const DeskRun& run) {
    return {run.splits.train.poses.data(), std::min<std::size_t>(5000, run.splits.train.size())};
}

Outcome sampling(const DeskRun& run) {
    Rng rng = Rng::derive(0, "sampling");
    const SamplingReport r = eval_sampling(run.state.model, 1000, reference_of(run), rng);
    return {r.model.validity == 1.0 && r.model.plausibility.mean < r.baseline.plausibility.mean,
            fmt::format("validity {:.3f} (must be 1), manifold distance {:.3f} vs baseline {:.3f} deg (must be smaller), 1000 each",
                        r.model.validity, r.model.plausibility.mean, r.baseline.plausibility.mean)};
}

Outcome interpolation(const DeskRun& run) {
    Rng rng = Rng::derive(0, "pairs");
    const auto pairs = seeded_pairs(run.splits.test.size(), 50, rng);
    const InterpolationReport r = eval_interpolation(run.state.model, run.splits.test.poses, pairs, 10, reference_of(run));
    return {r.smooth_count == pairs.size() && r.plausible_count == pairs.size() && r.baseline_violations >= 1,
            fmt::format("smooth {}/{} (step <= 2x pair step), plausible {}/{} (distance <= 3x endpoint error), baseline violations {} (need >= 1); "
                        "distance {:.3f} vs baseline {:.3f} deg",
                        r.smooth_count, pairs.size(), r.plausible_count, pairs.size(), r.baseline_violations, r.max_manifold_distance.mean,
                        r.baseline_max_manifold_distance.mean)};
}

Outcome round_trips(const DeskRun& run, const fs::path& work) {
    // Checkpoint reload: encodings of 100 poses.
    const TrainState loaded = load_checkpoint(run.checkpoint);
    std::size_t encode_diffs = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        const Pose& p = run.splits.test.poses[i];
        const auto a = encode(run.state.model, p), b = encode(loaded.model, p);
        encode_diffs += !(a.code == b.code) || !(a.continuous == b.continuous);
    }

    // Resume: 1000 steps straight versus 500, save, reload, 500 more.
    RunConfig cfg = run.cfg;
    cfg.train.steps = 1000;
    TrainState straight = start_run(cfg, run.state.model.skeleton, run.data);
    run_training(straight, run.splits.train, run.splits.val);
    cfg.train.steps = 500;
    TrainState first = start_run(cfg, run.state.model.skeleton, run.data);
    run_training(first, run.splits.train, run.splits.val);
    save_checkpoint(work / "half.qpck", first);
    TrainState resumed = load_checkpoint(work / "half.qpck");
    resumed.config.steps = 1000;
    run_training(resumed, run.splits.train, run.splits.val);
    const bool resume_identical = checkpoint_bytes(straight) == checkpoint_bytes(resumed);

    // Pose files.
    PoseDataset subset;
    subset.skeleton_id = run.data.skeleton_id;
    Rng rng(23);
    for (int i = 0; i < 1000; ++i) subset.poses.push_back(test_support::random_pose(run.state.model.skeleton, rng));
    save_poses(work / "roundtrip.qpse", subset);
    const PoseDataset back = load_poses(work / "roundtrip.qpse", run.state.model.skeleton);
    double comp_err = 0.0;
    bool canonical = back.size() == subset.size();
    for (std::size_t i = 0; canonical && i < subset.size(); ++i) {
        for (std::size_t j = 0; j < subset.poses[i].size(); ++j) {
            const auto a = subset.poses[i].joints[j].components(), b = back.poses[i].joints[j].components();
            for (int c = 0; c < 4; ++c) comp_err = std::max(comp_err, std::abs(a[static_cast<std::size_t>(c)] - b[static_cast<std::size_t>(c)]));
            canonical = canonical && is_canonical_unit(back.poses[i].joints[j].components());
        }
    }
    const auto expected_size = 24 + subset.size() * 21 * 16;
    const bool size_ok = fs::file_size(work / "roundtrip.qpse") == expected_size;
    return {encode_diffs == 0 && resume_identical && comp_err <= 1e-6 && canonical && size_ok,
            fmt::format("checkpoint encode diffs {}/100, resume 500+500 vs 1000 {}, QPSE max component err {:.2e} (tol 1e-6), canonical {}, size {}",
                        encode_diffs, resume_identical ? "bitwise identical" : "DIFFERS", comp_err, canonical ? "yes" : "no",
                        size_ok ? "exact" : "wrong")};
}

Outcome cli_service(const DeskRun& run, const fs::path& work, const fs::path& cli) {
    const QPoserModel m = load_model(run.checkpoint);
    PoseService service(m);
    Rng rng(24);
    std::size_t identical = 0;
    for (int i = 0; i < 20; ++i) {
        const LatentCode code = sample(m, rng).code;
        const nlohmann::json latent = latent_to_json(m, code);
        const fs::path in = work / fmt::format("latent_{:02d}.json", i);
        const fs::path out = work / fmt::format("decoded_{:02d}.json", i);
        std::ofstream(in, std::ios::binary) << json_text(latent);
        const std::string cmd = quoted(cli) + " decode --checkpoint " + quoted(run.checkpoint) + " --latent " + quoted(in) + " --out " +
                                quoted(out) + " 2>/dev/null";
        if (std::system(cmd.c_str()) != 0) continue;
        const auto response = service.handle("POST", "/decode", json_text({{"latent", latent}}));
        identical += response.status == 200 && response.body == read_file(out);
    }
    return {identical == 20, fmt::format("{}/20 random latents decode to byte-identical JSON via CLI and POST /decode", identical)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance run for the desk configuration"};
    fs::path work, cli, config;
    app.add_option("--workdir", work, "Scratch directory")->required();
    app.add_option("--cli", cli, "qposer executable")->required()->check(CLI::ExistingFile);
    app.add_option("--config", config, "Desk run configuration")->required()->check(CLI::ExistingFile);
    app.add_option("--known-failure", known_failures, "Criterion expected to fail; any other outcome is an error");
    CLI11_PARSE(app, argc, argv);

    spdlog::set_level(spdlog::level::warn);
    fs::create_directories(work);
    const auto t0 = Clock::now();

    run("gradient-correctness", gradients);
    run("quantization-oracle", quantization);
    run("geometry-oracles", geometry);

    DeskRun desk;
    try {
        desk.cfg = RunConfig::from_json(read_json_file(config));
        std::ofstream(work / "desk.json", std::ios::binary) << json_text(desk.cfg.to_json());
        const Skeleton s = Skeleton::body21();
        ManifoldSpec spec;
        spec.seed = 7;
        save_poses(work / "desk.qpse", generate_manifold(spec, 20000, s));
        desk.data = load_poses(work / "desk.qpse", s);
        desk.splits = split(desk.data, desk.cfg.split);
        desk.state = start_run(desk.cfg, s, desk.data);
        const auto t_train = Clock::now();
        run_training(desk.state, desk.splits.train, desk.splits.val);
        desk.train_seconds = seconds_since(t_train);
        desk.checkpoint = work / "desk.qpck";
        save_checkpoint(desk.checkpoint, desk.state);
    } catch (const std::exception& e) {
        std::printf("desk run failed: %s\n", e.what());
        for (const char* name : {"desk-training", "escalated-error", "ablation-direction", "sampling", "interpolation", "round-trips",
                                 "cli-service-coherence"})
            report(name, {false, "desk run unavailable"});
        return 1;
    }

    run("desk-training", [&] { return desk_training(desk, work, cli); });
    run("escalated-error", [&] { return escalated(desk); });
    run("sampling", [&] { return sampling(desk); });
    run("interpolation", [&] { return interpolation(desk); });
    run("round-trips", [&] { return round_trips(desk, work); });
    run("cli-service-coherence", [&] { return cli_service(desk, work, cli); });
    run("ablation-direction", [&] { return ablation(desk); });

    std::printf("%d of 10 criteria failed, %d unexpected outcomes, %.0f s total\n", failures, unexpected, seconds_since(t0));
    return unexpected == 0 ? 0 : 1;
}
