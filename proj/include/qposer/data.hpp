// SPDX-License-Identifier: Apache-2.0
//
// Pose datasets: the seeded synthetic pose manifold, splitting, and the two
// on-disk formats (QPSE binary, JSON lines).
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qposer/geometry.hpp"
#include "qposer/rng.hpp"

namespace qposer {

struct PoseDataset {
    std::string skeleton_id;
    std::vector<Pose> poses;
    std::string provenance;

    std::size_t size() const { return poses.size(); }
    /// FNV-1a over skeleton id and the float64 components of every pose.
    std::uint64_t content_hash() const;
};

/// Smooth m-dimensional surface in joint space. For u in [-1, 1]^m:
///   theta_j(u) = limit_j * tanh(sum_k W_jk sin(omega_jk u_k + phi_jk))
///   joint_j    = canonical quaternion of (axis_j, theta_j)
struct ManifoldSpec {
    std::uint64_t seed = 1;
    int intrinsic_dim = 6;
    std::vector<double> joint_limit_deg;  // empty: default_joint_limits(skeleton)
    double weight_scale = 0.4;            // W_k ~ U(-scale * decay^k, scale * decay^k)
    double weight_decay = 1.0;            // in (0, 1]
    double omega_min = 0.5;               // omega ~ U(min, max)
    double omega_max = 1.5;

    void validate(const Skeleton& s) const;
    /// 45 degrees for spine, neck and head joints, 90 elsewhere.
    static std::vector<double> default_joint_limits(const Skeleton& s);
};

struct ManifoldParams {
    std::vector<Vec3> axes;                 // per joint, unit
    std::vector<double> limit_rad;          // per joint
    std::vector<std::vector<double>> weight, omega, phase;  // [joint][k]

    static ManifoldParams derive(const ManifoldSpec& spec, const Skeleton& s);
    Pose pose_at(std::span<const double> u, const std::string& skeleton_id) const;
    /// Joint angles in radians.
    std::vector<double> angles_at(std::span<const double> u) const;
};

/// n poses at u ~ U[-1,1]^m. Bitwise deterministic in (spec, n); the first
/// k poses of a larger run equal a run of size k.
PoseDataset generate_manifold(const ManifoldSpec& spec, std::size_t n, const Skeleton& s);

/// Minimum mpjae_deg from p to any reference pose (exhaustive scan).
double manifold_distance(const Pose& p, std::span<const Pose> reference);
double manifold_distance(const Pose& p, const PoseDataset& reference);

struct SplitSpec {
    double train = 0.8, val = 0.1, test = 0.1;
    std::uint64_t seed = 0;
    void validate() const;
};

struct Splits {
    PoseDataset train, val, test;
};

/// Seeded shuffle, then contiguous partition with round(n*train), round(n*val), rest.
Splits split(const PoseDataset& ds, const SplitSpec& s);

enum class PoseFileFormat { qpse, jsonl };

/// Format chosen from the extension: .qpse binary, anything else JSON lines.
PoseFileFormat format_for_path(const std::filesystem::path& path);

/// QPSE layout (little endian):
///   "QPSE" | u32 version = 1 | u32 joint count | u32 reserved = 0 | u64 pose count
///   | pose_count * joint_count * 4 float32 (w x y z per joint)
void save_poses(const std::filesystem::path& path, const PoseDataset& ds);
void save_poses(const std::filesystem::path& path, const PoseDataset& ds, PoseFileFormat fmt);

/// Detects the format from the leading magic. Components are re-canonicalized.
/// Throws format on bad magic, truncation, non-finite or zero quaternions,
/// and mismatch when the joint count differs from `s`.
PoseDataset load_poses(const std::filesystem::path& path, const Skeleton& s);

constexpr std::uint32_t kQpseVersion = 1;
constexpr std::size_t kQpseHeaderBytes = 24;

}  // namespace qposer
