// SPDX-License-Identifier: Apache-2.0
//
// Quaternion joint rotations, the skeleton description, forward kinematics
// and the per-joint angular error metric.
#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace qposer {

using Vec3 = std::array<double, 3>;
using Vec4 = std::array<double, 4>;

/// Unit quaternion in sign-canonical form: w >= 0, and when w == 0 the first
/// nonzero of (x, y, z) is positive. Only obtainable through canonicalize().
class UnitQuaternion {
public:
    UnitQuaternion() = default;  // identity

    static UnitQuaternion identity() { return {}; }

    double w() const { return c_[0]; }
    double x() const { return c_[1]; }
    double y() const { return c_[2]; }
    double z() const { return c_[3]; }
    const Vec4& components() const { return c_; }

    friend bool operator==(const UnitQuaternion&, const UnitQuaternion&) = default;

private:
    friend UnitQuaternion canonicalize(const Vec4& v);
    explicit UnitQuaternion(const Vec4& c) : c_(c) {}

    Vec4 c_{1.0, 0.0, 0.0, 0.0};
};

/// Normalizes v and fixes its sign. Throws invalid_argument on zero or
/// non-finite input. Idempotent bitwise.
UnitQuaternion canonicalize(const Vec4& v);

/// Rotation of `radians` about `axis` (need not be normalized).
UnitQuaternion from_axis_angle(const Vec3& axis, double radians);

/// Hamilton product a*b, canonicalized.
UnitQuaternion multiply(const UnitQuaternion& a, const UnitQuaternion& b);

Vec3 rotate(const UnitQuaternion& q, const Vec3& v);

/// Rotation angle of a^-1 b in degrees, in [0, 180]. Exactly 0 for a == b.
double geodesic_angle_deg(const UnitQuaternion& a, const UnitQuaternion& b);

/// Joint hierarchy with per-joint bone offsets and part assignment.
/// Parents precede children; roots have parent -1 and sit at their offset.
struct Skeleton {
    std::string name;
    std::vector<std::string> joint_names;
    std::vector<int> parent_index;
    std::vector<Vec3> bone_offset;        // meters, in the parent frame
    std::vector<std::string> part_names;  // ordered
    std::vector<int> part_of_joint;       // index into part_names

    std::size_t joint_count() const { return joint_names.size(); }
    std::size_t bone_count() const;

    /// Joint indices owned by part `p`, ascending.
    std::vector<int> joints_of_part(std::size_t p) const;
    int part_index(const std::string& part) const;  // -1 if absent

    /// Throws invalid_argument when any structural invariant fails.
    void validate() const;

    /// The shipped 21-joint body skeleton (see data/body21.json).
    static Skeleton body21();

    static Skeleton from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    static Skeleton load(const std::filesystem::path& path);
};

/// One canonical quaternion per skeleton joint.
struct Pose {
    std::string skeleton_id;
    std::vector<UnitQuaternion> joints;

    std::size_t size() const { return joints.size(); }

    /// Row-major [w x y z] per joint.
    std::vector<double> flatten() const;
    void flatten_into(double* out) const;

    /// Canonicalizes each 4-block of `flat`.
    static Pose from_flat(std::string skeleton_id, const double* flat, std::size_t joint_count);

    friend bool operator==(const Pose&, const Pose&) = default;
};

Pose rest_pose(const Skeleton& s);

/// True when the pose is bound to `s` and every joint is a canonical unit quaternion.
bool satisfies_invariants(const Pose& p, const Skeleton& s);
bool is_canonical_unit(const Vec4& q, double tol = 1e-6);

/// Mean per-joint geodesic angle in degrees. Throws mismatch on differing skeletons.
double mpjae_deg(const Pose& a, const Pose& b);

/// World positions per joint (meters).
std::vector<Vec3> forward_kinematics(const Pose& p, const Skeleton& s);

/// Per-joint component-wise blend then canonicalize; baseline for latent interpolation.
Pose joint_space_interpolate(const Pose& a, const Pose& b, double t);

}  // namespace qposer
