// SPDX-License-Identifier: Apache-2.0
#include "qposer/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <spdlog/spdlog.h>

#include "qposer/error.hpp"

namespace qposer {

MetricSummary summarize(std::span<const double> values) {
    if (values.empty()) fail(ErrorKind::invalid_argument, "summarize: no values");
    MetricSummary s;
    s.n = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(s.n);
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(sq / static_cast<double>(s.n));
    return s;
}

nlohmann::json to_json(const MetricSummary& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

PerPoseMetric eval_reconstruction(const QPoserModel& m, std::span<const Pose> test) {
    PerPoseMetric r;
    const auto recon = reconstruct_batch(m, test);
    r.values.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) r.values.push_back(mpjae_deg(test[i], recon[i]));
    r.summary = summarize(r.values);
    return r;
}

PerPoseMetric eval_escalated(const QPoserModel& m, std::span<const Pose> test, int k) {
    if (k < 2) fail(ErrorKind::invalid_argument, "escalated error needs at least 2 iterations");
    PerPoseMetric r;
    r.values.reserve(test.size());
    for (const auto& p : test) {
        const auto errors = iterate_roundtrip(m, p, k);
        r.values.push_back(errors.back() - errors.front());
    }
    r.summary = summarize(r.values);
    return r;
}

// ---------------------------------------------------------------------------
// Interpolation

FrameScores score_frames(std::span<const Pose> frames, std::span<const Pose> reference) {
    FrameScores s;
    for (std::size_t i = 1; i < frames.size(); ++i) s.max_step_mpjae = std::max(s.max_step_mpjae, mpjae_deg(frames[i - 1], frames[i]));
    for (std::size_t i = 1; i + 1 < frames.size(); ++i) s.max_manifold_distance = std::max(s.max_manifold_distance, manifold_distance(frames[i], reference));
    return s;
}

std::vector<std::pair<std::size_t, std::size_t>> seeded_pairs(std::size_t n, std::size_t count, Rng& rng) {
    if (n < 2) fail(ErrorKind::invalid_argument, "pairs need at least two poses");
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(count);
    while (out.size() < count) {
        const auto a = static_cast<std::size_t>(rng.uniform_index(n));
        const auto b = static_cast<std::size_t>(rng.uniform_index(n));
        if (a != b) out.emplace_back(a, b);
    }
    return out;
}

InterpolationReport eval_interpolation(const QPoserModel& m, std::span<const Pose> test,
                                       std::span<const std::pair<std::size_t, std::size_t>> pairs, int steps,
                                       std::span<const Pose> reference) {
    if (steps < 3) fail(ErrorKind::invalid_argument, "interpolation evaluation needs at least 3 steps");
    if (pairs.empty()) fail(ErrorKind::invalid_argument, "interpolation evaluation needs at least one pair");
    InterpolationReport r;
    r.steps = steps;
    std::vector<double> step_l, dist_l, step_b, dist_b;
    for (const auto& [ia, ib] : pairs) {
        if (ia >= test.size() || ib >= test.size()) fail(ErrorKind::invalid_argument, "interpolation pair index out of range");
        const Pose& a = test[ia];
        const Pose& b = test[ib];
        InterpolationPair pr;
        pr.a = ia;
        pr.b = ib;
        pr.step_size = mpjae_deg(a, b) / static_cast<double>(steps - 1);

        const auto frames = interpolate(m, a, b, steps);
        pr.endpoint_error_a = mpjae_deg(a, frames.front());
        pr.endpoint_error_b = mpjae_deg(b, frames.back());
        pr.latent = score_frames(frames, reference);

        std::vector<Pose> baseline;
        baseline.reserve(static_cast<std::size_t>(steps));
        for (int k = 0; k < steps; ++k) baseline.push_back(joint_space_interpolate(a, b, static_cast<double>(k) / (steps - 1)));
        pr.baseline = score_frames(baseline, reference);

        const double plausibility_bound = 3.0 * 0.5 * (pr.endpoint_error_a + pr.endpoint_error_b);
        pr.smooth = pr.latent.max_step_mpjae <= 2.0 * pr.step_size;
        pr.plausible = pr.latent.max_manifold_distance <= plausibility_bound;
        pr.baseline_plausible = pr.baseline.max_manifold_distance <= plausibility_bound;
        r.smooth_count += pr.smooth;
        r.plausible_count += pr.plausible;
        r.baseline_violations += !pr.baseline_plausible;

        step_l.push_back(pr.latent.max_step_mpjae);
        dist_l.push_back(pr.latent.max_manifold_distance);
        step_b.push_back(pr.baseline.max_step_mpjae);
        dist_b.push_back(pr.baseline.max_manifold_distance);
        r.pairs.push_back(pr);
    }
    r.max_step_mpjae = summarize(step_l);
    r.max_manifold_distance = summarize(dist_l);
    r.baseline_max_step_mpjae = summarize(step_b);
    r.baseline_max_manifold_distance = summarize(dist_b);
    return r;
}

// ---------------------------------------------------------------------------
// Sampling

UnitQuaternion uniform_rotation(Rng& rng) {
    for (;;) {
        const Vec4 v{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        const double n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3];
        if (n2 > 1e-6 && n2 <= 1.0) return canonicalize(v);
    }
}

PoseSetScore score_pose_set(std::span<const Pose> poses, const Skeleton& s, std::span<const Pose> reference) {
    if (poses.size() < 2) fail(ErrorKind::invalid_argument, "pose set scoring needs at least two poses");
    PoseSetScore r;
    std::size_t valid = 0;
    for (const auto& p : poses) valid += satisfies_invariants(p, s);
    r.validity = static_cast<double>(valid) / static_cast<double>(poses.size());

    std::vector<double> pairwise;
    pairwise.reserve(poses.size() * (poses.size() - 1) / 2);
    for (std::size_t i = 0; i < poses.size(); ++i)
        for (std::size_t j = i + 1; j < poses.size(); ++j) pairwise.push_back(mpjae_deg(poses[i], poses[j]));
    r.diversity = summarize(pairwise);

    std::vector<double> dist;
    dist.reserve(poses.size());
    for (const auto& p : poses) dist.push_back(manifold_distance(p, reference));
    r.plausibility = summarize(dist);
    return r;
}

SamplingReport eval_sampling(const QPoserModel& m, std::size_t n, std::span<const Pose> reference, Rng& rng) {
    if (n < 2) fail(ErrorKind::invalid_argument, "sampling evaluation needs n >= 2");
    SamplingReport r;
    r.n = n;
    std::vector<Pose> samples, baseline;
    samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) samples.push_back(sample(m, rng).pose);
    for (std::size_t i = 0; i < n; ++i) {
        Pose p{m.skeleton.name, {}};
        for (std::size_t j = 0; j < m.skeleton.joint_count(); ++j) p.joints.push_back(uniform_rotation(rng));
        baseline.push_back(std::move(p));
    }
    r.model = score_pose_set(samples, m.skeleton, reference);
    r.baseline = score_pose_set(baseline, m.skeleton, reference);
    return r;
}

// ---------------------------------------------------------------------------
// Local modification

double mpjae_over(const Pose& a, const Pose& b, std::span<const int> joints) {
    if (joints.empty()) return 0.0;
    double sum = 0.0;
    for (int j : joints) sum += geodesic_angle_deg(a.joints.at(static_cast<std::size_t>(j)), b.joints.at(static_cast<std::size_t>(j)));
    return sum / static_cast<double>(joints.size());
}

std::pair<bool, double> local_modification_trial(const QPoserModel& m, const LatentCode& base, const LatentCode& source,
                                                 const std::string& part) {
    const LatentCode modified = modify_part(m, base, part, source);
    const Pose before = decode_quantized(m, base);
    const Pose after = decode_quantized(m, modified);
    const auto& joints = m.layout.parts[static_cast<std::size_t>(m.layout.part_index(part))].joint_indices;
    std::vector<char> target(m.skeleton.joint_count(), 0);
    for (int j : joints) target[static_cast<std::size_t>(j)] = 1;
    bool local = true;
    for (std::size_t j = 0; j < target.size(); ++j) {
        if (!target[j] && !(before.joints[j] == after.joints[j])) local = false;
    }
    // Same part codes, global group from base versus from source.
    const Pose in_source = decode_quantized(m, source);
    return {local, mpjae_over(after, in_source, joints)};
}

LocalModReport eval_local_modification(const QPoserModel& m, std::span<const Pose> test, Rng& rng, std::size_t trials) {
    if (test.size() < 2) fail(ErrorKind::invalid_argument, "local modification needs at least two test poses");
    if (trials < 1) fail(ErrorKind::invalid_argument, "local modification needs at least one trial");
    LocalModReport r;
    r.trials = trials;
    std::size_t local = 0;
    std::vector<double> shifts;
    for (std::size_t t = 0; t < trials; ++t) {
        const auto ib = static_cast<std::size_t>(rng.uniform_index(test.size()));
        const auto is = static_cast<std::size_t>(rng.uniform_index(test.size()));
        const auto& part = m.layout.parts[static_cast<std::size_t>(rng.uniform_index(m.layout.parts.size()))].name;
        const auto [ok, shift] = local_modification_trial(m, encode_code(m, test[ib]), encode_code(m, test[is]), part);
        local += ok;
        shifts.push_back(shift);
    }
    r.locality_rate = static_cast<double>(local) / static_cast<double>(trials);
    r.embodied_shift = summarize(shifts);
    return r;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationVariant> default_ablation_variants(const Skeleton& s) {
    const PartLayout desk = PartLayout::desk(s);
    return {{"1 head per part", PartLayout::desk_heads(s, 1, 1)},
            {"4 heads per part", PartLayout::desk_heads(s, 4, 2)},
            {"global conditioning off", PartLayout::single_group(s, desk.slot_count(), 16, desk.d_code)}};
}

std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const Splits& data, const AblationSettings& settings) {
    if (data.test.poses.empty()) fail(ErrorKind::invalid_argument, "ablation needs a non-empty test split");
    const Skeleton skeleton = Skeleton::body21();
    const std::size_t n_eval = std::min(settings.eval_poses, data.test.size());
    const std::span<const Pose> eval_subset(data.test.poses.data(), n_eval);
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        spdlog::info("ablation '{}': {} slots, {} steps", v.name, v.layout.slot_count(), settings.train.steps);
        TrainState state = TrainState::start(build_model(v.layout, skeleton, settings.hidden, settings.model_seed), settings.train);
        run_training(state, data.train, data.val);
        const QPoserModel& m = state.model;
        Rng rng = Rng::derive(settings.train.seed, "ablation-modify");
        AblationRow row;
        row.name = v.name;
        row.slots = v.layout.slot_count();
        row.reconstruction = eval_reconstruction(m, data.test.poses).summary;
        row.escalated = eval_escalated(m, eval_subset, settings.escalated_iterations).summary;
        row.embodied_shift = eval_local_modification(m, data.test.poses, rng, settings.modification_trials).embodied_shift;
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Reference rows

std::vector<ReferenceRow> published_reference_rows() {
    return {
        {"reconstruction", "QPoser", 2.62, 1.64, ""},
        {"reconstruction", "VPoser", 7.47, 5.57, ""},
        {"reconstruction", "GAN-S", 10.62, 8.51, ""},
        {"escalated", "QPoser", 0.34, 1.49, "50 iterations"},
        {"escalated", "QPoser", 0.33, std::nullopt, "1000 iterations"},
        {"ablation", "1 head per part", 14.96, std::nullopt, ""},
        {"ablation", "8 heads per part", 9.70, std::nullopt, ""},
        {"ablation", "63 heads + global", 2.62, std::nullopt, ""},
    };
}

// ---------------------------------------------------------------------------
// Reports

namespace {

nlohmann::json per_pose_json(const PerPoseMetric& m) { return {{"summary", to_json(m.summary)}, {"values", m.values}}; }

nlohmann::json frame_json(const FrameScores& f) {
    return {{"max_step_mpjae", f.max_step_mpjae}, {"max_manifold_distance", f.max_manifold_distance}};
}

nlohmann::json pose_set_json(const PoseSetScore& s) {
    return {{"validity", s.validity}, {"diversity", to_json(s.diversity)}, {"plausibility", to_json(s.plausibility)}};
}

std::string fmt_row(const std::string& label, const MetricSummary& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-34s %9.3f %9.3f %7zu\n", label.c_str(), m.mean, m.std, m.n);
    return buf;
}

std::string fmt_value(const std::string& label, double v) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-34s %9.3f\n", label.c_str(), v);
    return buf;
}

std::string reference_lines(const std::string& block) {
    std::string out;
    for (const auto& r : published_reference_rows()) {
        if (r.block != block) continue;
        char buf[200];
        const std::string label = r.model + (r.note.empty() ? "" : " (" + r.note + ")");
        if (r.std)
            std::snprintf(buf, sizeof buf, "  %-34s %9.2f %9.2f   [%s]\n", label.c_str(), r.mean, *r.std, kReferenceLabel);
        else
            std::snprintf(buf, sizeof buf, "  %-34s %9.2f %9s   [%s]\n", label.c_str(), r.mean, "-", kReferenceLabel);
        out += buf;
    }
    return out;
}

}  // namespace

nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["fingerprint"] = fingerprint_hex(r.fingerprint);
    j["dataset_hash"] = fingerprint_hex(r.dataset_hash);
    if (r.reconstruction) j["reconstruction"] = per_pose_json(*r.reconstruction);
    if (r.escalated) {
        j["escalated"] = per_pose_json(*r.escalated);
        j["escalated"]["iterations"] = r.escalated_iterations;
    }
    if (r.interpolation) {
        const auto& in = *r.interpolation;
        nlohmann::json pairs = nlohmann::json::array();
        for (const auto& p : in.pairs) {
            pairs.push_back({{"a", p.a},
                             {"b", p.b},
                             {"step_size", p.step_size},
                             {"endpoint_error", {p.endpoint_error_a, p.endpoint_error_b}},
                             {"latent", frame_json(p.latent)},
                             {"baseline", frame_json(p.baseline)},
                             {"smooth", p.smooth},
                             {"plausible", p.plausible},
                             {"baseline_plausible", p.baseline_plausible}});
        }
        j["interpolation"] = {{"steps", in.steps},
                              {"pairs", pairs},
                              {"max_step_mpjae", to_json(in.max_step_mpjae)},
                              {"max_manifold_distance", to_json(in.max_manifold_distance)},
                              {"baseline_max_step_mpjae", to_json(in.baseline_max_step_mpjae)},
                              {"baseline_max_manifold_distance", to_json(in.baseline_max_manifold_distance)},
                              {"smooth_count", in.smooth_count},
                              {"plausible_count", in.plausible_count},
                              {"baseline_violations", in.baseline_violations}};
    }
    if (r.sampling)
        j["sampling"] = {{"n", r.sampling->n}, {"model", pose_set_json(r.sampling->model)}, {"baseline", pose_set_json(r.sampling->baseline)}};
    if (r.local_modification) {
        const auto& lm = *r.local_modification;
        j["local_modification"] = {{"trials", lm.trials}, {"locality_rate", lm.locality_rate}, {"embodied_shift", to_json(lm.embodied_shift)}};
    }
    if (r.ablation) {
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& a : *r.ablation) {
            rows.push_back({{"name", a.name},
                            {"slots", a.slots},
                            {"reconstruction", to_json(a.reconstruction)},
                            {"escalated", to_json(a.escalated)},
                            {"embodied_shift", to_json(a.embodied_shift)}});
        }
        j["ablation"] = {{"steps", r.ablation_steps}, {"rows", rows}};
    }
    nlohmann::json refs = nlohmann::json::array();
    for (const auto& ref : published_reference_rows()) {
        nlohmann::json e = {{"block", ref.block}, {"model", ref.model}, {"mean", ref.mean}, {"label", kReferenceLabel}};
        e["std"] = ref.std ? nlohmann::json(*ref.std) : nlohmann::json(nullptr);
        if (!ref.note.empty()) e["note"] = ref.note;
        refs.push_back(std::move(e));
    }
    j["reference"] = refs;
    j["renders"] = r.renders;
    return j;
}

std::string report_to_text(const EvalReport& r) {
    std::string out;
    out += "model " + fingerprint_hex(r.fingerprint) + "  dataset " + fingerprint_hex(r.dataset_hash) + "\n";
    char head[160];
    std::snprintf(head, sizeof head, "  %-34s %9s %9s %7s\n", "", "mean", "std", "n");
    if (r.reconstruction) {
        out += "\nReconstruction MPJAE (deg)\n";
        out += head;
        out += fmt_row("this model", r.reconstruction->summary);
        out += reference_lines("reconstruction");
    }
    if (r.escalated) {
        out += "\nEscalated error, " + std::to_string(r.escalated_iterations) + " iterations (deg)\n";
        out += head;
        out += fmt_row("this model", r.escalated->summary);
        out += reference_lines("escalated");
    }
    if (r.interpolation) {
        const auto& in = *r.interpolation;
        out += "\nInterpolation, " + std::to_string(in.pairs.size()) + " pairs x " + std::to_string(in.steps) + " frames (deg)\n";
        out += head;
        out += fmt_row("latent max step", in.max_step_mpjae);
        out += fmt_row("latent max manifold distance", in.max_manifold_distance);
        out += fmt_row("joint-space max step", in.baseline_max_step_mpjae);
        out += fmt_row("joint-space max manifold distance", in.baseline_max_manifold_distance);
        out += "  smooth " + std::to_string(in.smooth_count) + "/" + std::to_string(in.pairs.size()) + ", plausible " +
               std::to_string(in.plausible_count) + "/" + std::to_string(in.pairs.size()) + ", joint-space violations " +
               std::to_string(in.baseline_violations) + "\n";
    }
    if (r.sampling) {
        const auto& s = *r.sampling;
        out += "\nSampling, n = " + std::to_string(s.n) + " (deg)\n";
        out += head;
        out += fmt_value("model validity", s.model.validity);
        out += fmt_row("model diversity", s.model.diversity);
        out += fmt_row("model manifold distance", s.model.plausibility);
        out += fmt_value("uniform validity", s.baseline.validity);
        out += fmt_row("uniform diversity", s.baseline.diversity);
        out += fmt_row("uniform manifold distance", s.baseline.plausibility);
    }
    if (r.local_modification) {
        const auto& lm = *r.local_modification;
        out += "\nLocal modification, " + std::to_string(lm.trials) + " trials\n";
        out += head;
        out += fmt_value("locality rate", lm.locality_rate);
        out += fmt_row("embodied shift (deg)", lm.embodied_shift);
    }
    if (r.ablation) {
        out += "\nAblation, " + std::to_string(r.ablation_steps) + " steps per variant (deg)\n";
        char buf[200];
        std::snprintf(buf, sizeof buf, "  %-34s %6s %9s %9s %9s\n", "", "slots", "recon", "escal.", "shift");
        out += buf;
        for (const auto& a : *r.ablation) {
            std::snprintf(buf, sizeof buf, "  %-34s %6d %9.3f %9.3f %9.3f\n", a.name.c_str(), a.slots, a.reconstruction.mean, a.escalated.mean,
                          a.embodied_shift.mean);
            out += buf;
        }
        for (const auto& ref : published_reference_rows()) {
            if (ref.block != "ablation") continue;
            std::snprintf(buf, sizeof buf, "  %-34s %6s %9.2f %9s %9s   [%s]\n", ref.model.c_str(), "-", ref.mean, "-", "-", kReferenceLabel);
            out += buf;
        }
    }
    if (!r.renders.empty()) {
        out += "\nRenders\n";
        for (const auto& p : r.renders) out += "  " + p + "\n";
    }
    return out;
}

std::string run_directory_name(std::uint64_t fingerprint, std::uint64_t dataset_hash) {
    return fingerprint_hex(fingerprint) + "-" + fingerprint_hex(dataset_hash);
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

constexpr double kCanvas = 480.0;
constexpr double kScale = 150.0;  // pixels per metre
constexpr double kOriginX = 240.0;
constexpr double kOriginY = 220.0;

constexpr const char* kPartColors[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};

std::string coord(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s = buf;
    if (s == "-0.00") s = "0.00";
    return s;
}

}  // namespace

std::string render_pose_svg(const Pose& p, const Skeleton& s) {
    const auto pos = forward_kinematics(p, s);
    std::vector<std::string> px, py;
    for (const auto& v : pos) {
        px.push_back(coord(kOriginX + kScale * v[0]));
        py.push_back(coord(kOriginY - kScale * v[1]));
    }
    const std::string size = coord(kCanvas);
    std::string out;
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + size + "\" height=\"" + size + "\" viewBox=\"0 0 " + size + " " + size + "\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
    out += "<g stroke-width=\"4\" stroke-linecap=\"round\">\n";
    for (std::size_t j = 0; j < s.joint_count(); ++j) {
        const int parent = s.parent_index[j];
        if (parent < 0) continue;
        const auto color = kPartColors[static_cast<std::size_t>(s.part_of_joint[j]) % std::size(kPartColors)];
        const auto pj = static_cast<std::size_t>(parent);
        out += "<line x1=\"" + px[pj] + "\" y1=\"" + py[pj] + "\" x2=\"" + px[j] + "\" y2=\"" + py[j] + "\" stroke=\"" + color + "\"/>\n";
    }
    out += "</g>\n<g fill=\"#222222\">\n";
    for (std::size_t j = 0; j < s.joint_count(); ++j) {
        out += "<circle cx=\"" + px[j] + "\" cy=\"" + py[j] + "\" r=\"3\"><title>" + s.joint_names[j] + "</title></circle>\n";
    }
    out += "</g>\n</svg>\n";
    return out;
}

void write_pose_svg(const std::filesystem::path& path, const Pose& p, const Skeleton& s) {
    std::ofstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::not_found, "cannot write " + path.string());
    f << render_pose_svg(p, s);
    if (!f) fail(ErrorKind::format, "failed writing " + path.string());
}

}  // namespace qposer
