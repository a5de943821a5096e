// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "qposer/model.hpp"

namespace test_support {

/// Five joints, two parts: "A" = {root, a1}, "B" = {b1, b2, b3}.
inline qposer::Skeleton tiny_skeleton() {
    return qposer::Skeleton::from_json(nlohmann::json::parse(R"({
        "name": "tiny",
        "parts": ["A", "B"],
        "joints": [
            {"name": "root", "parent": null, "offset": [0, 0, 0], "part": "A"},
            {"name": "a1", "parent": "root", "offset": [0, 0.3, 0], "part": "A"},
            {"name": "b1", "parent": "root", "offset": [0.2, 0, 0], "part": "B"},
            {"name": "b2", "parent": "b1", "offset": [0.2, 0, 0], "part": "B"},
            {"name": "b3", "parent": "b2", "offset": [0, 0, 0.1], "part": "B"}
        ]})"));
}

/// Two parts with two heads each, one global head; K = 4 everywhere, d_code 3.
inline qposer::PartLayout tiny_layout(const qposer::Skeleton& s, int global_heads = 1) {
    qposer::PartLayout l;
    l.d_code = 3;
    l.codebooks = {{"a", 4}, {"b", 4}, {"g", 4}};
    l.parts = {{"A", 2, "a", s.joints_of_part(0)}, {"B", 2, "b", s.joints_of_part(1)}};
    l.global_head_count = global_heads;
    l.global_codebook_id = global_heads > 0 ? "g" : "";
    if (global_heads == 0) l.codebooks.pop_back();
    l.validate(s);
    return l;
}

inline qposer::QPoserModel tiny_model(std::uint64_t seed = 1, int global_heads = 1) {
    const auto s = tiny_skeleton();
    return qposer::build_model(tiny_layout(s, global_heads), s, qposer::HiddenSpec{{8}, qposer::Activation::leaky_relu}, seed);
}

}  // namespace test_support
