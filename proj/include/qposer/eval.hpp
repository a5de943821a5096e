// SPDX-License-Identifier: Apache-2.0
//
// Evaluation suite: reconstruction and escalated error, interpolation
// quality, sampling validity/diversity/plausibility, local modification,
// head-count and global-conditioning ablations, and stick-figure SVGs.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "qposer/data.hpp"
#include "qposer/model.hpp"
#include "qposer/training.hpp"

namespace qposer {

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // population
    std::size_t n = 0;
};

/// Throws invalid_argument on an empty input.
MetricSummary summarize(std::span<const double> values);
nlohmann::json to_json(const MetricSummary& m);

struct PerPoseMetric {
    MetricSummary summary;
    std::vector<double> values;
};

/// mpjae(p, decode(encode(p))) per pose.
PerPoseMetric eval_reconstruction(const QPoserModel& m, std::span<const Pose> test);

/// error(k) - error(1) of iterate_roundtrip per pose. k >= 2.
PerPoseMetric eval_escalated(const QPoserModel& m, std::span<const Pose> test, int k);

// ---------------------------------------------------------------------------
// Interpolation

/// Smoothness and plausibility of one frame sequence.
struct FrameScores {
    double max_step_mpjae = 0.0;         // consecutive frames
    double max_manifold_distance = 0.0;  // intermediate frames only
};

FrameScores score_frames(std::span<const Pose> frames, std::span<const Pose> reference);

struct InterpolationPair {
    std::size_t a = 0, b = 0;  // indices into the test set
    double step_size = 0.0;    // mpjae(a, b) / (steps - 1)
    double endpoint_error_a = 0.0, endpoint_error_b = 0.0;  // mpjae(a, first frame), mpjae(b, last frame)
    FrameScores latent, baseline;
    bool smooth = false;              // latent.max_step_mpjae <= 2 * step_size
    bool plausible = false;           // latent.max_manifold_distance <= 3 * mean endpoint error
    bool baseline_plausible = false;  // same bound for the joint-space baseline
};

struct InterpolationReport {
    int steps = 0;
    std::vector<InterpolationPair> pairs;
    MetricSummary max_step_mpjae, max_manifold_distance, baseline_max_step_mpjae, baseline_max_manifold_distance;
    std::size_t smooth_count = 0, plausible_count = 0, baseline_violations = 0;
};

/// `count` seeded pairs of distinct indices below n.
std::vector<std::pair<std::size_t, std::size_t>> seeded_pairs(std::size_t n, std::size_t count, Rng& rng);

InterpolationReport eval_interpolation(const QPoserModel& m, std::span<const Pose> test,
                                       std::span<const std::pair<std::size_t, std::size_t>> pairs, int steps,
                                       std::span<const Pose> reference);

// ---------------------------------------------------------------------------
// Sampling

struct PoseSetScore {
    double validity = 0.0;       // fraction passing pose invariants
    MetricSummary diversity;     // pairwise mpjae
    MetricSummary plausibility;  // manifold distance
};

struct SamplingReport {
    std::size_t n = 0;
    PoseSetScore model, baseline;  // baseline: independent uniform rotation per joint
};

PoseSetScore score_pose_set(std::span<const Pose> poses, const Skeleton& s, std::span<const Pose> reference);

/// Uniformly distributed rotation, canonical.
UnitQuaternion uniform_rotation(Rng& rng);

SamplingReport eval_sampling(const QPoserModel& m, std::size_t n, std::span<const Pose> reference, Rng& rng);

// ---------------------------------------------------------------------------
// Local modification

struct LocalModReport {
    std::size_t trials = 0;
    double locality_rate = 0.0;   // non-target joints bitwise unchanged
    MetricSummary embodied_shift;  // degrees over target-part joints
};

/// Mean geodesic angle over the listed joints.
double mpjae_over(const Pose& a, const Pose& b, std::span<const int> joints);

/// One trial: the part group of `source` placed into `base`. Returns
/// {non-target joints unchanged, shift of the part under base's vs source's global group}.
std::pair<bool, double> local_modification_trial(const QPoserModel& m, const LatentCode& base, const LatentCode& source,
                                                 const std::string& part);

LocalModReport eval_local_modification(const QPoserModel& m, std::span<const Pose> test, Rng& rng, std::size_t trials = 200);

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
    std::string name;
    PartLayout layout;
};

/// "1 head per part", "4 heads per part", "global conditioning off".
std::vector<AblationVariant> default_ablation_variants(const Skeleton& s);

struct AblationRow {
    std::string name;
    int slots = 0;
    MetricSummary reconstruction, escalated, embodied_shift;
};

struct AblationSettings {
    TrainConfig train;  // shared budget and seed
    HiddenSpec hidden;
    std::uint64_t model_seed = 1;
    int escalated_iterations = 50;
    std::size_t eval_poses = 500;  // leading test poses used for escalated error
    std::size_t modification_trials = 200;
};

std::vector<AblationRow> run_ablation(const std::vector<AblationVariant>& variants, const Splits& data, const AblationSettings& settings);

// ---------------------------------------------------------------------------
// Published reference values, carried for side-by-side display only.

struct ReferenceRow {
    std::string block;  // "reconstruction", "escalated" or "ablation"
    std::string model;
    double mean = 0.0;
    std::optional<double> std;
    std::string note;
};

std::vector<ReferenceRow> published_reference_rows();
constexpr const char* kReferenceLabel = "published, not reproduced";

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
    std::uint64_t fingerprint = 0;
    std::uint64_t dataset_hash = 0;
    std::optional<PerPoseMetric> reconstruction;
    std::optional<PerPoseMetric> escalated;
    int escalated_iterations = 0;
    std::optional<InterpolationReport> interpolation;
    std::optional<SamplingReport> sampling;
    std::optional<LocalModReport> local_modification;
    std::optional<std::vector<AblationRow>> ablation;
    int ablation_steps = 0;
    std::vector<std::string> renders;
};

nlohmann::json report_to_json(const EvalReport& r);
std::string report_to_text(const EvalReport& r);

/// "<fingerprint>-<dataset hash>" in hex.
std::string run_directory_name(std::uint64_t fingerprint, std::uint64_t dataset_hash);

// ---------------------------------------------------------------------------
// Rendering

/// Front orthographic stick figure (x right, y up), one line per bone and
/// one circle per joint. Byte-deterministic.
std::string render_pose_svg(const Pose& p, const Skeleton& s);
void write_pose_svg(const std::filesystem::path& path, const Pose& p, const Skeleton& s);

}  // namespace qposer
