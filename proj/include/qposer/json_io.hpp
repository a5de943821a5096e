// SPDX-License-Identifier: Apache-2.0
//
// JSON forms of poses and decoded results, shared by the CLI and the service
// so both emit identical bytes.
#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "qposer/geometry.hpp"
#include "qposer/model.hpp"

namespace qposer {

/// {"skeleton": name, "joints": [[w, x, y, z], ...]}
nlohmann::json pose_to_json(const Pose& p);

/// Accepts a pose object or any object carrying one under "pose".
/// Quaternions are canonicalized. Throws invalid_argument naming the
/// violated invariant, mismatch when bound to another skeleton.
Pose pose_from_json(const nlohmann::json& j, const Skeleton& s);

nlohmann::json positions_to_json(const std::vector<Vec3>& positions);

/// {"pose": ..., "joint_positions": ...}
nlohmann::json decoded_to_json(const Pose& p, const Skeleton& s);

/// Canonical text of a JSON document: two-space indent, trailing newline.
std::string json_text(const nlohmann::json& j);

/// Throws format on unreadable files or invalid JSON.
nlohmann::json read_json_file(const std::filesystem::path& path);

/// "-" writes to standard output.
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace qposer
