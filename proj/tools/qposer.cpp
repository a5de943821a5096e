// SPDX-License-Identifier: Apache-2.0
//
// qposer: data generation, training, evaluation, latent operations and the
// HTTP service behind one executable.
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "qposer/data.hpp"
#include "qposer/error.hpp"
#include "qposer/eval.hpp"
#include "qposer/json_io.hpp"
#include "qposer/model.hpp"
#include "qposer/run.hpp"
#include "qposer/service.hpp"
#include "qposer/training.hpp"

namespace fs = std::filesystem;
using namespace qposer;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

int exit_code(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::not_found: return kUsage;
        case ErrorKind::numeric: return kNumeric;
        default: return kData;
    }
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("qposer");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* env = std::getenv("QPOSER_LOG");
    const std::string level = env ? env : "info";
    if (level == "error")
        spdlog::set_level(spdlog::level::err);
    else if (level == "info")
        spdlog::set_level(spdlog::level::info);
    else if (level == "debug")
        spdlog::set_level(spdlog::level::debug);
    else
        fail(ErrorKind::not_found, "QPOSER_LOG must be one of error, info, debug (got '" + level + "')");
}

QPoserModel load_checkpoint_model(const fs::path& path) { return load_checkpoint(path).model; }

nlohmann::json read_json(const fs::path& path) {
    if (path == "-") {
        try {
            return nlohmann::json::parse(std::cin);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, std::string("stdin: invalid JSON: ") + e.what());
        }
    }
    return read_json_file(path);
}

/// A latent file, or a pose file that is encoded on the fly.
LatentCode load_latent_or_pose(const QPoserModel& m, const fs::path& path) {
    const auto j = read_json(path);
    const bool is_pose = j.is_object() && (j.contains("joints") || j.contains("pose"));
    return is_pose ? encode_code(m, pose_from_json(j, m.skeleton)) : latent_from_json(m, j);
}

std::string indexed_name(const std::string& stem, std::size_t i, const std::string& ext) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%03zu", i);
    return stem + buf + ext;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::format, "cannot create directory " + dir.string() + ": " + ec.message());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::uint64_t seed = 7;
    std::size_t count = 20000;
    int intrinsic_dim = 6;
    double weight_scale = ManifoldSpec{}.weight_scale;
    double weight_decay = ManifoldSpec{}.weight_decay;
    std::string skeleton;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
    const Skeleton s = a.skeleton.empty() ? Skeleton::body21() : Skeleton::load(a.skeleton);
    ManifoldSpec spec;
    spec.seed = a.seed;
    spec.intrinsic_dim = a.intrinsic_dim;
    spec.weight_scale = a.weight_scale;
    spec.weight_decay = a.weight_decay;
    const PoseDataset ds = generate_manifold(spec, a.count, s);
    save_poses(a.out, ds);
    spdlog::info("wrote {} poses to {} (hash {})", ds.size(), a.out, fingerprint_hex(ds.content_hash()));
    return kOk;
}

struct TrainArgs {
    std::string data, config, out_checkpoint, history, resume;
    std::optional<std::uint64_t> seed, steps;
};

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = a.config.empty() ? RunConfig{} : RunConfig::from_json(read_json_file(a.config));
    if (a.seed) {
        cfg.model_seed = *a.seed;
        cfg.train.seed = *a.seed;
    }
    if (a.steps) cfg.train.steps = *a.steps;
    cfg.train.validate();

    TrainState state;
    PoseDataset ds;
    Splits splits;
    if (!a.resume.empty()) {
        state = load_checkpoint(a.resume);
        ds = load_poses(a.data, state.model.skeleton);
        splits = rebind_splits(state.data_info, ds);
        if (a.steps) state.config.steps = *a.steps;
        spdlog::info("resuming at step {} of {}", state.step, state.config.steps);
    } else {
        const Skeleton s = Skeleton::body21();
        ds = load_poses(a.data, s);
        splits = split(ds, cfg.split);
        state = start_run(cfg, s, ds);
        spdlog::info("training {} slots on {} poses for {} steps", state.model.slot_count(), splits.train.size(), cfg.train.steps);
    }
    const auto t0 = std::chrono::steady_clock::now();
    run_training(state, splits.train, splits.val);
    spdlog::info("trained to step {} in {:.1f}s", state.step, seconds_since(t0));
    save_checkpoint(a.out_checkpoint, state);
    if (!a.history.empty()) write_text(a.history, history_csv(state.history, state.model.layout));
    spdlog::info("saved {} (model {})", a.out_checkpoint, fingerprint_hex(state.model.fingerprint));
    return kOk;
}

struct EvalArgs {
    std::string checkpoint, data, suite = "all", report, table, render_dir;
    int iterations = 50;
    std::uint64_t seed = 0;
    std::size_t samples = 1000, pairs = 50, reference_size = 5000, trials = 200;
    int steps = 10;
    std::optional<std::uint64_t> ablation_steps;
};

int cmd_eval(const EvalArgs& a) {
    const TrainState state = load_checkpoint(a.checkpoint);
    const QPoserModel& m = state.model;
    const PoseDataset ds = load_poses(a.data, m.skeleton);
    const Splits splits = rebind_splits(state.data_info, ds);
    const auto& test = splits.test.poses;
    const std::size_t n_ref = std::min(a.reference_size, splits.train.size());
    const std::span<const Pose> reference(splits.train.poses.data(), n_ref);
    const auto wants = [&](const char* s) { return a.suite == "all" || a.suite == s; };

    EvalReport report;
    report.fingerprint = m.fingerprint;
    report.dataset_hash = ds.content_hash();
    auto timed = [](const char* name, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        spdlog::info("{} done in {:.1f}s", name, seconds_since(t0));
    };
    if (wants("recon")) timed("reconstruction", [&] { report.reconstruction = eval_reconstruction(m, test); });
    if (wants("escalated")) {
        report.escalated_iterations = a.iterations;
        timed("escalated", [&] { report.escalated = eval_escalated(m, test, a.iterations); });
    }
    if (wants("interp")) {
        timed("interpolation", [&] {
            Rng rng = Rng::derive(a.seed, "pairs");
            const auto pairs = seeded_pairs(test.size(), a.pairs, rng);
            report.interpolation = eval_interpolation(m, test, pairs, a.steps, reference);
        });
    }
    if (wants("sample")) {
        timed("sampling", [&] {
            Rng rng = Rng::derive(a.seed, "sampling");
            report.sampling = eval_sampling(m, a.samples, reference, rng);
        });
    }
    if (wants("localmod")) {
        timed("local modification", [&] {
            Rng rng = Rng::derive(a.seed, "modify");
            report.local_modification = eval_local_modification(m, test, rng, a.trials);
        });
    }
    if (wants("ablation")) {
        timed("ablation", [&] {
            AblationSettings settings;
            settings.train = state.config;
            if (a.ablation_steps) settings.train.steps = *a.ablation_steps;
            settings.hidden = m.hidden;
            settings.model_seed = state.data_info.value("model_seed", std::uint64_t{1});
            settings.escalated_iterations = a.iterations;
            settings.modification_trials = a.trials;
            report.ablation_steps = static_cast<int>(settings.train.steps);
            report.ablation = run_ablation(default_ablation_variants(m.skeleton), splits, settings);
        });
    }
    if (!a.render_dir.empty()) {
        const fs::path dir = fs::path(a.render_dir) / run_directory_name(m.fingerprint, report.dataset_hash);
        ensure_dir(dir);
        const auto put = [&](const std::string& name, const Pose& p) {
            write_pose_svg(dir / name, p, m.skeleton);
            report.renders.push_back((dir / name).string());
        };
        put("rest.svg", rest_pose(m.skeleton));
        for (std::size_t i = 0; i < std::min<std::size_t>(4, test.size()); ++i) {
            put(indexed_name("test", i, "_input.svg"), test[i]);
            put(indexed_name("test", i, "_reconstruction.svg"), reconstruct(m, test[i]));
        }
        Rng rng = Rng::derive(a.seed, "render-samples");
        for (std::size_t i = 0; i < 4; ++i) put(indexed_name("sample", i, ".svg"), sample(m, rng).pose);
        if (test.size() >= 2) {
            const auto frames = interpolate(m, test[0], test[1], a.steps);
            for (std::size_t i = 0; i < frames.size(); ++i) {
                put(indexed_name("interp", i, ".svg"), frames[i]);
                put(indexed_name("joint_space", i, ".svg"), joint_space_interpolate(test[0], test[1], static_cast<double>(i) / (frames.size() - 1)));
            }
        }
    }
    write_text(a.report, json_text(report_to_json(report)));
    const std::string text = report_to_text(report);
    if (!a.table.empty()) write_text(a.table, text);
    if (a.report != "-" && a.table != "-") std::cerr << text;
    return kOk;
}

int cmd_encode(const std::string& checkpoint, const std::string& pose_file, const std::string& out) {
    const QPoserModel m = load_checkpoint_model(checkpoint);
    const Pose p = pose_from_json(read_json(pose_file), m.skeleton);
    write_text(out, json_text(latent_to_json(m, encode_code(m, p))));
    return kOk;
}

int cmd_decode(const std::string& checkpoint, const std::string& latent, const std::string& out, const std::string& svg) {
    const QPoserModel m = load_checkpoint_model(checkpoint);
    const auto j = read_json(latent);
    const LatentCode c = latent_from_json(m, j.is_object() && j.contains("latent") ? j.at("latent") : j);
    const Pose p = decode_quantized(m, c);
    write_text(out, json_text(decoded_to_json(p, m.skeleton)));
    if (!svg.empty()) write_pose_svg(svg, p, m.skeleton);
    return kOk;
}

int cmd_modify(const std::string& checkpoint, const std::string& base, const std::string& source, const std::string& part,
               const std::string& out) {
    const QPoserModel m = load_checkpoint_model(checkpoint);
    const LatentCode result = modify_part(m, load_latent_or_pose(m, base), part, load_latent_or_pose(m, source));
    write_text(out, json_text(latent_to_json(m, result)));
    return kOk;
}

int cmd_interpolate(const std::string& checkpoint, const std::string& from, const std::string& to, int steps, const std::string& out_dir) {
    const QPoserModel m = load_checkpoint_model(checkpoint);
    const Pose a = pose_from_json(read_json(from), m.skeleton);
    const Pose b = pose_from_json(read_json(to), m.skeleton);
    const auto frames = interpolate(m, a, b, steps);
    ensure_dir(out_dir);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        write_text(fs::path(out_dir) / indexed_name("frame", i, ".json"), json_text(decoded_to_json(frames[i], m.skeleton)));
        write_pose_svg(fs::path(out_dir) / indexed_name("frame", i, ".svg"), frames[i], m.skeleton);
    }
    spdlog::info("wrote {} frames to {}", frames.size(), out_dir);
    return kOk;
}

int cmd_sample(const std::string& checkpoint, std::size_t count, std::uint64_t seed, const std::string& out_dir) {
    const QPoserModel m = load_checkpoint_model(checkpoint);
    ensure_dir(out_dir);
    Rng rng(seed);
    for (std::size_t i = 0; i < count; ++i) {
        const Sample s = sample(m, rng);
        nlohmann::json j = decoded_to_json(s.pose, m.skeleton);
        j["latent"] = latent_to_json(m, s.code);
        write_text(fs::path(out_dir) / indexed_name("sample", i, ".json"), json_text(j));
        write_pose_svg(fs::path(out_dir) / indexed_name("sample", i, ".svg"), s.pose, m.skeleton);
    }
    spdlog::info("wrote {} samples to {}", count, out_dir);
    return kOk;
}

HttpServer* g_server = nullptr;

extern "C" void on_signal(int) {
    if (g_server) g_server->stop();
}

int cmd_serve(const std::string& checkpoint, const std::string& listen, const std::string& static_dir, bool expose_continuous) {
    ServiceOptions opts;
    opts.expose_continuous = expose_continuous;
    if (!static_dir.empty()) opts.static_dir = fs::path(static_dir);
    PoseService service(load_checkpoint_model(checkpoint), opts);
    HttpServer server(service);
    const auto [host, port] = parse_listen_address(listen);
    const int bound = server.bind(host, port);
    g_server = &server;
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    // Machine-readable line so callers using port 0 can find the server.
    std::cout << "listening on " << host << ":" << bound << std::endl;
    spdlog::info("model {} ready", fingerprint_hex(service.model().fingerprint));
    server.listen();
    g_server = nullptr;
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quantized part-based pose prior: data, training, evaluation, latent editing and service.", "qposer"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "qposer 0.1.0");

    GenDataArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "Generate poses from the seeded synthetic manifold");
    c_gen->add_option("--seed", gen.seed, "Manifold seed")->capture_default_str();
    c_gen->add_option("--count", gen.count, "Number of poses")->capture_default_str()->check(CLI::PositiveNumber);
    c_gen->add_option("--intrinsic-dim", gen.intrinsic_dim, "Manifold dimension m")->capture_default_str()->check(CLI::PositiveNumber);
    c_gen->add_option("--weight-scale", gen.weight_scale, "Mixing weights drawn from U(-s, s)")->capture_default_str();
    c_gen->add_option("--weight-decay", gen.weight_decay, "Per-dimension factor on the weight scale")->capture_default_str()->check(CLI::Range(1e-6, 1.0));
    c_gen->add_option("--skeleton", gen.skeleton, "Skeleton JSON (default: builtin body21)")->check(CLI::ExistingFile);
    c_gen->add_option("--out", gen.out, "Output file (.qpse binary, otherwise JSON lines)")->required();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train a model on a pose file");
    c_train->add_option("--data", tr.data, "Pose file")->required()->check(CLI::ExistingFile);
    c_train->add_option("--config", tr.config, "Run config JSON (default: desk)")->check(CLI::ExistingFile);
    c_train->add_option("--out-checkpoint", tr.out_checkpoint, "Checkpoint to write")->required();
    c_train->add_option("--history", tr.history, "Write the loss history CSV here");
    c_train->add_option("--resume", tr.resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
    c_train->add_option("--seed", tr.seed, "Override model and training seeds");
    c_train->add_option("--steps", tr.steps, "Override the step budget");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Run the evaluation suites");
    c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--data", ev.data, "Pose file the checkpoint was trained on")->required()->check(CLI::ExistingFile);
    c_eval->add_option("--suite", ev.suite, "Suite to run")
        ->capture_default_str()
        ->check(CLI::IsMember({"recon", "escalated", "interp", "sample", "localmod", "ablation", "all"}));
    c_eval->add_option("--iterations", ev.iterations, "Escalated-error iterations")->capture_default_str()->check(CLI::Range(2, 100000));
    c_eval->add_option("--report", ev.report, "JSON report path (- for stdout)")->required();
    c_eval->add_option("--table", ev.table, "Aligned text table path");
    c_eval->add_option("--render-dir", ev.render_dir, "Write SVG renders under this directory");
    c_eval->add_option("--seed", ev.seed, "Seed for pairs, samples and trials")->capture_default_str();
    c_eval->add_option("--samples", ev.samples, "Sampling suite size")->capture_default_str()->check(CLI::Range(2, 100000));
    c_eval->add_option("--pairs", ev.pairs, "Interpolation pairs")->capture_default_str()->check(CLI::PositiveNumber);
    c_eval->add_option("--steps", ev.steps, "Interpolation frames per pair")->capture_default_str()->check(CLI::Range(3, 1000));
    c_eval->add_option("--reference-size", ev.reference_size, "Training poses used as the plausibility reference")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    c_eval->add_option("--trials", ev.trials, "Local-modification trials")->capture_default_str()->check(CLI::PositiveNumber);
    c_eval->add_option("--ablation-steps", ev.ablation_steps, "Training steps per ablation variant (default: the checkpoint's budget)");

    std::string checkpoint, out, in_a, in_b, part, svg, out_dir, listen = "127.0.0.1:8080", static_dir;
    int steps = 10;
    std::size_t count = 8;
    std::uint64_t seed = 0;
    bool expose_continuous = false;

    auto* c_enc = app.add_subcommand("encode", "Encode a pose JSON file into a latent code");
    c_enc->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_enc->add_option("--pose-file", in_a, "Pose JSON (- for stdin)")->required();
    c_enc->add_option("--out", out, "Latent JSON output (- for stdout)")->required();

    auto* c_dec = app.add_subcommand("decode", "Decode a latent code into a pose");
    c_dec->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_dec->add_option("--latent", in_a, "Latent JSON (- for stdin)")->required();
    c_dec->add_option("--out", out, "Pose JSON output (- for stdout)")->required();
    c_dec->add_option("--svg", svg, "Also render the pose to this SVG");

    auto* c_mod = app.add_subcommand("modify", "Replace one part's codes with those of another latent or pose");
    c_mod->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_mod->add_option("--base", in_a, "Base latent or pose JSON")->required();
    c_mod->add_option("--source", in_b, "Source latent or pose JSON")->required();
    c_mod->add_option("--part", part, "Part name, e.g. LeftArm")->required();
    c_mod->add_option("--out", out, "Latent JSON output (- for stdout)")->required();

    auto* c_int = app.add_subcommand("interpolate", "Interpolate between two poses in latent space");
    c_int->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_int->add_option("--from", in_a, "Start pose JSON")->required();
    c_int->add_option("--to", in_b, "End pose JSON")->required();
    c_int->add_option("--steps", steps, "Number of frames")->capture_default_str()->check(CLI::Range(2, 1000));
    c_int->add_option("--out-dir", out_dir, "Directory for frame JSON and SVG files")->required();

    auto* c_smp = app.add_subcommand("sample", "Draw uniform code samples");
    c_smp->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_smp->add_option("--count", count, "Number of samples")->capture_default_str()->check(CLI::PositiveNumber);
    c_smp->add_option("--seed", seed, "Sampling seed")->capture_default_str();
    c_smp->add_option("--out-dir", out_dir, "Directory for sample JSON and SVG files")->required();

    auto* c_srv = app.add_subcommand("serve", "Serve the model over HTTP");
    c_srv->add_option("--checkpoint", checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
    c_srv->add_option("--listen", listen, "host:port (port 0 picks a free port)")->capture_default_str();
    c_srv->add_option("--static-dir", static_dir, "Serve static files from this directory at /")->check(CLI::ExistingDirectory);
    c_srv->add_flag("--expose-continuous", expose_continuous, "Allow pre-quantization encodings on /encode");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    try {
        setup_logging();
        if (*c_gen) return cmd_gen_data(gen);
        if (*c_train) return cmd_train(tr);
        if (*c_eval) return cmd_eval(ev);
        if (*c_enc) return cmd_encode(checkpoint, in_a, out);
        if (*c_dec) return cmd_decode(checkpoint, in_a, out, svg);
        if (*c_mod) return cmd_modify(checkpoint, in_a, in_b, part, out);
        if (*c_int) return cmd_interpolate(checkpoint, in_a, in_b, steps, out_dir);
        if (*c_smp) return cmd_sample(checkpoint, count, seed, out_dir);
        if (*c_srv) return cmd_serve(checkpoint, listen, static_dir, expose_continuous);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    }
    return kUsage;
}
