// SPDX-License-Identifier: Apache-2.0
#include "qposer/json_io.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "qposer/error.hpp"

namespace qposer {

nlohmann::json pose_to_json(const Pose& p) {
    nlohmann::json joints = nlohmann::json::array();
    for (const auto& q : p.joints) joints.push_back({q.w(), q.x(), q.y(), q.z()});
    return {{"skeleton", p.skeleton_id}, {"joints", std::move(joints)}};
}

Pose pose_from_json(const nlohmann::json& j, const Skeleton& s) {
    const nlohmann::json& body = (j.is_object() && j.contains("pose")) ? j.at("pose") : j;
    if (!body.is_object()) fail(ErrorKind::invalid_argument, "pose must be a JSON object with \"skeleton\" and \"joints\"");
    if (!body.contains("joints") || !body.at("joints").is_array()) fail(ErrorKind::invalid_argument, "pose.joints must be an array");
    const std::string skeleton = body.contains("skeleton") && body.at("skeleton").is_string() ? body.at("skeleton").get<std::string>() : s.name;
    if (skeleton != s.name) fail(ErrorKind::mismatch, "pose is bound to skeleton '" + skeleton + "', expected '" + s.name + "'");
    const auto& joints = body.at("joints");
    if (joints.size() != s.joint_count())
        fail(ErrorKind::invalid_argument,
             "pose.joints must hold " + std::to_string(s.joint_count()) + " quaternions, got " + std::to_string(joints.size()));
    Pose p{s.name, {}};
    p.joints.reserve(joints.size());
    for (std::size_t i = 0; i < joints.size(); ++i) {
        const auto& q = joints[i];
        const std::string where = "pose.joints[" + std::to_string(i) + "]";
        if (!q.is_array() || q.size() != 4) fail(ErrorKind::invalid_argument, where + " must be [w, x, y, z]");
        Vec4 v{};
        for (std::size_t k = 0; k < 4; ++k) {
            if (!q[k].is_number()) fail(ErrorKind::invalid_argument, where + " must contain numbers");
            v[k] = q[k].get<double>();
        }
        try {
            p.joints.push_back(canonicalize(v));
        } catch (const Error& e) {
            fail(ErrorKind::invalid_argument, where + ": " + e.what());
        }
    }
    return p;
}

nlohmann::json positions_to_json(const std::vector<Vec3>& positions) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& v : positions) out.push_back({v[0], v[1], v[2]});
    return out;
}

nlohmann::json decoded_to_json(const Pose& p, const Skeleton& s) {
    return {{"pose", pose_to_json(p)}, {"joint_positions", positions_to_json(forward_kinematics(p, s))}};
}

std::string json_text(const nlohmann::json& j) { return j.dump(2) + "\n"; }

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::format, "cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    try {
        return nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, path.string() + ": invalid JSON: " + e.what());
    }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path == "-") {
        std::cout << text;
        std::cout.flush();
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::format, "cannot write " + path.string());
    out << text;
    if (!out) fail(ErrorKind::format, "failed writing " + path.string());
}

}  // namespace qposer
