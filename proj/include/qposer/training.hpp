// SPDX-License-Identifier: Apache-2.0
//
// Training loop, history, and the QPCK checkpoint container.
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qposer/data.hpp"
#include "qposer/model.hpp"
#include "qposer/numerics.hpp"

namespace qposer {

enum class LrSchedule { constant, cosine };

std::string to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(const std::string& s);

struct TrainConfig {
    std::size_t batch_size = 64;
    std::uint64_t steps = 20000;
    double learning_rate = 1e-3;
    /// Optional cosine decay from learning_rate to learning_rate * lr_floor at the last step.
    LrSchedule lr_schedule = LrSchedule::constant;
    double lr_floor = 0.05;
    OptimizerKind optimizer = OptimizerKind::adaptive_moments;
    double momentum = 0.9;  // sgd only
    double commitment_weight = 1.0;
    double ema_decay = kDefaultEmaDecay;
    double ema_epsilon = kDefaultEmaEpsilon;
    std::uint64_t reseed_min_usage = 1;
    std::uint64_t eval_every = 500;
    std::uint64_t seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults.
    static TrainConfig from_json(const nlohmann::json& j);

    double learning_rate_at(std::uint64_t step) const;
};

struct HistoryEntry {
    std::uint64_t step = 0;
    double loss_total = 0.0;
    double loss_recon = 0.0;
    double loss_commit = 0.0;
    std::optional<double> val_mpjae;  // only on evaluation steps
    std::vector<double> usage;        // per codebook, evaluation steps only
};

/// Everything needed to continue a run bit for bit.
struct TrainState {
    QPoserModel model;
    TrainConfig config;
    OptimizerState optimizer;
    std::uint64_t step = 0;
    std::uint64_t batch_rng = 0;
    std::uint64_t reseed_rng = 0;
    std::vector<HistoryEntry> history;
    /// Free-form description of the training data (dataset hash, split), kept in META.
    nlohmann::json data_info = nlohmann::json::object();

    /// Fresh state. Sub-streams: Rng::derive(seed, "batch") draws batch
    /// indices, Rng::derive(seed, "reseed") drives code seeding and reseeding.
    static TrainState start(QPoserModel model, const TrainConfig& cfg);
};

using StepCallback = std::function<void(const TrainState&, const HistoryEntry&)>;

/// Runs until state.step == state.config.steps (or `until`, if smaller).
/// Per step: seeded batch, loss_and_grads, optimizer step, EMA codebook
/// update; dead-code reseeding at every epoch boundary; validation MPJAE and
/// codebook usage every eval_every steps and at the final step.
/// Throws numeric with the step number when the loss diverges.
void run_training(TrainState& state, const PoseDataset& train_set, const PoseDataset& val_set,
                  std::optional<std::uint64_t> until = std::nullopt, const StepCallback& on_eval = {});

struct TrainResult {
    QPoserModel model;
    std::vector<HistoryEntry> history;
};

TrainResult train(QPoserModel model, const PoseDataset& train_set, const PoseDataset& val_set, const TrainConfig& cfg);

/// Mean reconstruction MPJAE and per-codebook usage fraction over `poses`.
struct ValidationResult {
    double mpjae = 0.0;
    std::vector<double> usage;
};
ValidationResult validate_model(const QPoserModel& m, std::span<const Pose> poses);

/// CSV with header step,loss_total,loss_recon,loss_commit,val_mpjae,usage_<codebook id>...
std::string history_csv(const std::vector<HistoryEntry>& history, const PartLayout& layout);

// ---------------------------------------------------------------------------
// QPCK container (little endian):
//   "QPCK" | u32 version | u32 section count
//   per section: 4-byte tag | u64 payload length | payload | u32 CRC-32 of payload
// Sections: META (JSON), PARM (f64 parameters), CODE (codebooks and EMA
// state), OPTM (optimizer accumulators), HIST (JSON history).

constexpr std::uint32_t kCheckpointVersion = 1;

std::string checkpoint_bytes(const TrainState& state);
TrainState checkpoint_from_bytes(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
/// Throws format on bad magic, version mismatch, truncation or checksum failure.
TrainState load_checkpoint(const std::filesystem::path& path);

/// Wraps a bare model in a default training state for saving.
void save_model(const std::filesystem::path& path, const QPoserModel& m);
QPoserModel load_model(const std::filesystem::path& path);

}  // namespace qposer
