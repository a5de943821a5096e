// SPDX-License-Identifier: Apache-2.0
#include "qposer/geometry.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <fstream>
#include <numbers>
#include <unordered_set>

#include "qposer/error.hpp"

namespace qposer {

namespace {

// Raw (non-canonical) Hamilton product.
Vec4 hamilton(const Vec4& a, const Vec4& b) {
    return {a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
            a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
            a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
            a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]};
}

}  // namespace

UnitQuaternion canonicalize(const Vec4& v) {
    double sq = 0.0;
    for (double c : v) {
        if (!std::isfinite(c)) fail(ErrorKind::invalid_argument, "invalid quaternion: non-finite component");
        sq += c * c;
    }
    if (sq == 0.0) fail(ErrorKind::invalid_argument, "invalid quaternion: zero norm");

    Vec4 q = v;
    // Inputs already unit to rounding are left unscaled; this is what makes
    // canonicalize bitwise idempotent.
    if (std::abs(sq - 1.0) > 8.0 * DBL_EPSILON) {
        const double n = std::sqrt(sq);
        for (double& c : q) c /= n;
    }

    bool flip = q[0] < 0.0;
    if (q[0] == 0.0) {
        for (int i = 1; i < 4; ++i) {
            if (q[i] != 0.0) {
                flip = q[i] < 0.0;
                break;
            }
        }
    }
    if (flip) {
        for (double& c : q) c = -c;
    }
    // -0.0 would compare equal but serialize differently.
    for (double& c : q) {
        if (c == 0.0) c = 0.0;
    }
    return UnitQuaternion(q);
}

UnitQuaternion from_axis_angle(const Vec3& axis, double radians) {
    const double n = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    if (!(n > 0.0)) fail(ErrorKind::invalid_argument, "rotation axis has zero length");
    const double s = std::sin(radians / 2.0) / n;
    return canonicalize({std::cos(radians / 2.0), axis[0] * s, axis[1] * s, axis[2] * s});
}

UnitQuaternion multiply(const UnitQuaternion& a, const UnitQuaternion& b) {
    return canonicalize(hamilton(a.components(), b.components()));
}

Vec3 rotate(const UnitQuaternion& q, const Vec3& v) {
    // v' = v + 2w(u x v) + 2 u x (u x v)
    const double w = q.w();
    const Vec3 u{q.x(), q.y(), q.z()};
    const Vec3 t{2.0 * (u[1] * v[2] - u[2] * v[1]), 2.0 * (u[2] * v[0] - u[0] * v[2]),
                 2.0 * (u[0] * v[1] - u[1] * v[0])};
    return {v[0] + w * t[0] + (u[1] * t[2] - u[2] * t[1]), v[1] + w * t[1] + (u[2] * t[0] - u[0] * t[2]),
            v[2] + w * t[2] + (u[0] * t[1] - u[1] * t[0])};
}

double geodesic_angle_deg(const UnitQuaternion& a, const UnitQuaternion& b) {
    // Relative rotation conj(a)*b; angle = 2*atan2(|vec|, |w|).
    const double aw = a.w(), ax = a.x(), ay = a.y(), az = a.z();
    const double bw = b.w(), bx = b.x(), by = b.y(), bz = b.z();
    const double w = aw * bw + (ax * bx + ay * by + az * bz);
    const double vx = (aw * bx - bw * ax) - (ay * bz - az * by);
    const double vy = (aw * by - bw * ay) - (az * bx - ax * bz);
    const double vz = (aw * bz - bw * az) - (ax * by - ay * bx);
    const double vn = std::sqrt(vx * vx + vy * vy + vz * vz);
    return 2.0 * std::atan2(vn, std::abs(w)) * (180.0 / std::numbers::pi);
}

// ---------------------------------------------------------------------------
// Skeleton

std::size_t Skeleton::bone_count() const {
    return static_cast<std::size_t>(std::count_if(parent_index.begin(), parent_index.end(), [](int p) { return p >= 0; }));
}

std::vector<int> Skeleton::joints_of_part(std::size_t p) const {
    std::vector<int> out;
    for (std::size_t j = 0; j < part_of_joint.size(); ++j) {
        if (part_of_joint[j] == static_cast<int>(p)) out.push_back(static_cast<int>(j));
    }
    return out;
}

int Skeleton::part_index(const std::string& part) const {
    const auto it = std::find(part_names.begin(), part_names.end(), part);
    return it == part_names.end() ? -1 : static_cast<int>(it - part_names.begin());
}

void Skeleton::validate() const {
    const std::size_t n = joint_names.size();
    if (n == 0) fail(ErrorKind::invalid_argument, "skeleton has no joints");
    if (parent_index.size() != n || bone_offset.size() != n || part_of_joint.size() != n)
        fail(ErrorKind::invalid_argument, "skeleton field lengths disagree");
    std::unordered_set<std::string> seen;
    for (std::size_t j = 0; j < n; ++j) {
        if (!seen.insert(joint_names[j]).second) fail(ErrorKind::invalid_argument, "duplicate joint name " + joint_names[j]);
        const int p = parent_index[j];
        if (p < -1 || p >= static_cast<int>(j))
            fail(ErrorKind::invalid_argument, "joint " + joint_names[j] + ": parent must precede child");
        for (double c : bone_offset[j]) {
            if (!std::isfinite(c)) fail(ErrorKind::invalid_argument, "non-finite bone offset");
        }
        if (part_of_joint[j] < 0 || part_of_joint[j] >= static_cast<int>(part_names.size()))
            fail(ErrorKind::invalid_argument, "joint " + joint_names[j] + ": invalid part index");
    }
    for (std::size_t p = 0; p < part_names.size(); ++p) {
        if (joints_of_part(p).empty()) fail(ErrorKind::invalid_argument, "part " + part_names[p] + " owns no joints");
    }
}

Skeleton Skeleton::body21() {
    struct Row {
        const char* name;
        int parent;
        Vec3 offset;
        int part;
    };
    // Parts: 0 Head, 1 Torso, 2 LeftArm, 3 RightArm, 4 LeftLeg, 5 RightLeg.
    // +x is the body's left, +y up, +z forward.
    static constexpr Row rows[] = {
        {"spine1", -1, {0.0, 0.0, 0.0}, 1},
        {"left_hip", 0, {0.09, -0.19, 0.0}, 4},
        {"right_hip", 0, {-0.09, -0.19, 0.0}, 5},
        {"spine2", 0, {0.0, 0.13, 0.0}, 1},
        {"left_knee", 1, {0.0, -0.38, 0.0}, 4},
        {"right_knee", 2, {0.0, -0.38, 0.0}, 5},
        {"spine3", 3, {0.0, 0.14, 0.0}, 1},
        {"left_ankle", 4, {0.0, -0.40, -0.02}, 4},
        {"right_ankle", 5, {0.0, -0.40, -0.02}, 5},
        {"left_foot", 7, {0.0, -0.05, 0.12}, 4},
        {"right_foot", 8, {0.0, -0.05, 0.12}, 5},
        {"neck", 6, {0.0, 0.21, 0.0}, 0},
        {"left_collar", 6, {0.07, 0.12, 0.0}, 1},
        {"right_collar", 6, {-0.07, 0.12, 0.0}, 1},
        {"head", 11, {0.0, 0.10, 0.03}, 0},
        {"left_shoulder", 12, {0.11, 0.03, 0.0}, 2},
        {"right_shoulder", 13, {-0.11, 0.03, 0.0}, 3},
        {"left_elbow", 15, {0.26, 0.0, 0.0}, 2},
        {"right_elbow", 16, {-0.26, 0.0, 0.0}, 3},
        {"left_wrist", 17, {0.25, 0.0, 0.0}, 2},
        {"right_wrist", 18, {-0.25, 0.0, 0.0}, 3},
    };
    Skeleton s;
    s.name = "body21";
    s.part_names = {"Head", "Torso", "LeftArm", "RightArm", "LeftLeg", "RightLeg"};
    for (const Row& r : rows) {
        s.joint_names.emplace_back(r.name);
        s.parent_index.push_back(r.parent);
        s.bone_offset.push_back(r.offset);
        s.part_of_joint.push_back(r.part);
    }
    return s;
}

Skeleton Skeleton::from_json(const nlohmann::json& j) {
    Skeleton s;
    try {
        s.name = j.at("name").get<std::string>();
        if (j.contains("parts")) s.part_names = j.at("parts").get<std::vector<std::string>>();
        for (const auto& jj : j.at("joints")) {
            s.joint_names.push_back(jj.at("name").get<std::string>());
            const auto& parent = jj.at("parent");
            if (parent.is_null()) {
                s.parent_index.push_back(-1);
            } else if (parent.is_number_integer()) {
                s.parent_index.push_back(parent.get<int>());
            } else {
                const auto name = parent.get<std::string>();
                const auto it = std::find(s.joint_names.begin(), s.joint_names.end(), name);
                if (it == s.joint_names.end() || it + 1 == s.joint_names.end())
                    fail(ErrorKind::format, "skeleton: parent '" + name + "' must be declared before its child");
                s.parent_index.push_back(static_cast<int>(it - s.joint_names.begin()));
            }
            s.bone_offset.push_back(jj.at("offset").get<Vec3>());
            const auto part = jj.at("part").get<std::string>();
            int idx = s.part_index(part);
            if (idx < 0) {
                if (j.contains("parts")) fail(ErrorKind::format, "skeleton: joint uses undeclared part " + part);
                s.part_names.push_back(part);
                idx = static_cast<int>(s.part_names.size()) - 1;
            }
            s.part_of_joint.push_back(idx);
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("skeleton json: ") + e.what());
    }
    s.validate();
    return s;
}

nlohmann::json Skeleton::to_json() const {
    nlohmann::json joints = nlohmann::json::array();
    for (std::size_t j = 0; j < joint_names.size(); ++j) {
        nlohmann::json parent = parent_index[j] < 0 ? nlohmann::json(nullptr) : nlohmann::json(joint_names[parent_index[j]]);
        joints.push_back({{"name", joint_names[j]},
                          {"parent", parent},
                          {"offset", bone_offset[j]},
                          {"part", part_names[part_of_joint[j]]}});
    }
    return {{"name", name}, {"parts", part_names}, {"joints", joints}};
}

Skeleton Skeleton::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::not_found, "cannot open skeleton file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, "skeleton file " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

// ---------------------------------------------------------------------------
// Pose

std::vector<double> Pose::flatten() const {
    std::vector<double> out(joints.size() * 4);
    flatten_into(out.data());
    return out;
}

void Pose::flatten_into(double* out) const {
    for (const auto& q : joints) {
        const auto& c = q.components();
        out = std::copy(c.begin(), c.end(), out);
    }
}

Pose Pose::from_flat(std::string skeleton_id, const double* flat, std::size_t joint_count) {
    Pose p{std::move(skeleton_id), {}};
    p.joints.reserve(joint_count);
    for (std::size_t j = 0; j < joint_count; ++j) {
        p.joints.push_back(canonicalize({flat[4 * j], flat[4 * j + 1], flat[4 * j + 2], flat[4 * j + 3]}));
    }
    return p;
}

Pose rest_pose(const Skeleton& s) { return Pose{s.name, std::vector<UnitQuaternion>(s.joint_count())}; }

bool is_canonical_unit(const Vec4& q, double tol) {
    double sq = 0.0;
    for (double c : q) {
        if (!std::isfinite(c)) return false;
        sq += c * c;
    }
    if (std::abs(sq - 1.0) > tol) return false;
    if (q[0] > 0.0) return true;
    if (q[0] < 0.0) return false;
    for (int i = 1; i < 4; ++i) {
        if (q[i] != 0.0) return q[i] > 0.0;
    }
    return false;
}

bool satisfies_invariants(const Pose& p, const Skeleton& s) {
    if (p.skeleton_id != s.name || p.joints.size() != s.joint_count()) return false;
    return std::all_of(p.joints.begin(), p.joints.end(), [](const UnitQuaternion& q) { return is_canonical_unit(q.components()); });
}

double mpjae_deg(const Pose& a, const Pose& b) {
    if (a.skeleton_id != b.skeleton_id || a.joints.size() != b.joints.size())
        fail(ErrorKind::mismatch, "mpjae: poses are bound to different skeletons");
    if (a.joints.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t j = 0; j < a.joints.size(); ++j) sum += geodesic_angle_deg(a.joints[j], b.joints[j]);
    return sum / static_cast<double>(a.joints.size());
}

std::vector<Vec3> forward_kinematics(const Pose& p, const Skeleton& s) {
    if (p.joints.size() != s.joint_count()) fail(ErrorKind::mismatch, "forward_kinematics: pose/skeleton joint count mismatch");
    const std::size_t n = s.joint_count();
    std::vector<Vec3> pos(n);
    std::vector<UnitQuaternion> world(n);
    for (std::size_t j = 0; j < n; ++j) {
        const int parent = s.parent_index[j];
        if (parent < 0) {
            pos[j] = s.bone_offset[j];
            world[j] = p.joints[j];
        } else {
            const Vec3 d = rotate(world[parent], s.bone_offset[j]);
            pos[j] = {pos[parent][0] + d[0], pos[parent][1] + d[1], pos[parent][2] + d[2]};
            world[j] = multiply(world[parent], p.joints[j]);
        }
    }
    return pos;
}

Pose joint_space_interpolate(const Pose& a, const Pose& b, double t) {
    if (!(t >= 0.0 && t <= 1.0)) fail(ErrorKind::invalid_argument, "interpolation parameter outside [0, 1]");
    if (a.skeleton_id != b.skeleton_id || a.joints.size() != b.joints.size())
        fail(ErrorKind::mismatch, "interpolation between poses of different skeletons");
    if (t == 0.0) return a;
    if (t == 1.0) return b;
    Pose out{a.skeleton_id, {}};
    out.joints.reserve(a.joints.size());
    for (std::size_t j = 0; j < a.joints.size(); ++j) {
        const auto& qa = a.joints[j].components();
        const auto& qb = b.joints[j].components();
        if (qa == qb) {
            out.joints.push_back(a.joints[j]);
            continue;
        }
        Vec4 m;
        double sq = 0.0;
        for (int i = 0; i < 4; ++i) {
            m[i] = (1.0 - t) * qa[i] + t * qb[i];
            sq += m[i] * m[i];
        }
        if (sq < 1e-24) fail(ErrorKind::numeric, "degenerate interpolation: blended quaternion has zero norm");
        out.joints.push_back(canonicalize(m));
    }
    return out;
}

}  // namespace qposer
