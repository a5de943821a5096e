// SPDX-License-Identifier: Apache-2.0
//
// Run configuration shared by the CLI and the acceptance suite: model shape,
// split and optimizer settings, and the dataset binding kept in checkpoints.
#pragma once

#include <cstdint>

#include <nlohmann/json.hpp>

#include "qposer/data.hpp"
#include "qposer/model.hpp"
#include "qposer/training.hpp"

namespace qposer {

struct RunConfig {
    nlohmann::json layout = "desk";  // "desk", "full" or an explicit layout object
    HiddenSpec hidden;
    std::uint64_t model_seed = 1;
    SplitSpec split;
    TrainConfig train;

    PartLayout resolve_layout(const Skeleton& s) const;
    nlohmann::json to_json() const;
    /// Missing keys keep their defaults. Throws invalid_argument.
    static RunConfig from_json(const nlohmann::json& j);
};

nlohmann::json hidden_to_json(const HiddenSpec& h);
HiddenSpec hidden_from_json(const nlohmann::json& j);
nlohmann::json split_to_json(const SplitSpec& s);
SplitSpec split_from_json(const nlohmann::json& j);

/// {"dataset_hash", "count", "split"} as stored in checkpoint metadata.
nlohmann::json data_binding(const PoseDataset& ds, const SplitSpec& split);

/// Re-derives the training split of `ds` recorded in `binding`. Throws
/// mismatch when the dataset hash differs.
Splits rebind_splits(const nlohmann::json& binding, const PoseDataset& ds);

/// Fresh training state for `cfg` on `ds`, with the dataset binding (plus
/// "model_seed") set.
TrainState start_run(const RunConfig& cfg, const Skeleton& s, const PoseDataset& ds);

}  // namespace qposer
