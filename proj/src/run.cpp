// SPDX-License-Identifier: Apache-2.0
#include "qposer/run.hpp"

#include "qposer/error.hpp"

namespace qposer {

PartLayout RunConfig::resolve_layout(const Skeleton& s) const {
    if (layout.is_string()) {
        const auto name = layout.get<std::string>();
        if (name == "desk") return PartLayout::desk(s);
        if (name == "full") return PartLayout::full(s);
        fail(ErrorKind::invalid_argument, "unknown layout '" + name + "' (valid: desk, full, or a layout object)");
    }
    return PartLayout::from_json(layout, s);
}

nlohmann::json hidden_to_json(const HiddenSpec& h) { return {{"widths", h.widths}, {"activation", to_string(h.activation)}}; }

HiddenSpec hidden_from_json(const nlohmann::json& j) {
    HiddenSpec h;
    if (j.contains("widths")) h.widths = j.at("widths").get<std::vector<int>>();
    if (j.contains("activation")) h.activation = activation_from_string(j.at("activation").get<std::string>());
    for (int w : h.widths)
        if (w <= 0) fail(ErrorKind::invalid_argument, "hidden widths must be positive");
    return h;
}

nlohmann::json split_to_json(const SplitSpec& s) { return {{"train", s.train}, {"val", s.val}, {"test", s.test}, {"seed", s.seed}}; }

SplitSpec split_from_json(const nlohmann::json& j) {
    SplitSpec s;
    s.train = j.value("train", s.train);
    s.val = j.value("val", s.val);
    s.test = j.value("test", s.test);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

nlohmann::json RunConfig::to_json() const {
    return {{"layout", layout}, {"hidden", hidden_to_json(hidden)}, {"model_seed", model_seed}, {"split", split_to_json(split)}, {"train", train.to_json()}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorKind::invalid_argument, "run config must be a JSON object");
    RunConfig c;
    try {
        if (j.contains("layout")) c.layout = j.at("layout");
        if (j.contains("hidden")) c.hidden = hidden_from_json(j.at("hidden"));
        c.model_seed = j.value("model_seed", c.model_seed);
        if (j.contains("split")) c.split = split_from_json(j.at("split"));
        if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_argument, std::string("run config: ") + e.what());
    }
    c.train.validate();
    return c;
}

nlohmann::json data_binding(const PoseDataset& ds, const SplitSpec& split) {
    return {{"dataset_hash", fingerprint_hex(ds.content_hash())}, {"count", ds.size()}, {"split", split_to_json(split)}};
}

Splits rebind_splits(const nlohmann::json& binding, const PoseDataset& ds) {
    if (!binding.contains("dataset_hash") || !binding.contains("split"))
        fail(ErrorKind::format, "checkpoint carries no dataset binding");
    const auto expected = binding.at("dataset_hash").get<std::string>();
    const auto actual = fingerprint_hex(ds.content_hash());
    if (expected != actual) fail(ErrorKind::mismatch, "dataset hash " + actual + " does not match the checkpoint's " + expected);
    return split(ds, split_from_json(binding.at("split")));
}

TrainState start_run(const RunConfig& cfg, const Skeleton& s, const PoseDataset& ds) {
    if (ds.skeleton_id != s.name) fail(ErrorKind::mismatch, "dataset skeleton '" + ds.skeleton_id + "' differs from '" + s.name + "'");
    TrainState state = TrainState::start(build_model(cfg.resolve_layout(s), s, cfg.hidden, cfg.model_seed), cfg.train);
    state.data_info = data_binding(ds, cfg.split);
    state.data_info["model_seed"] = cfg.model_seed;
    return state;
}

}  // namespace qposer
