// SPDX-License-Identifier: Apache-2.0
#include "qposer/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

#include "qposer/error.hpp"

namespace qposer {

std::uint64_t PoseDataset::content_hash() const {
    std::uint64_t h = fnv1a(skeleton_id);
    std::vector<double> flat;
    for (const auto& p : poses) {
        flat = p.flatten();
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(flat.data()), flat.size() * sizeof(double)), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Manifold

std::vector<double> ManifoldSpec::default_joint_limits(const Skeleton& s) {
    std::vector<double> out;
    for (const auto& name : s.joint_names) {
        const bool stiff = name.rfind("spine", 0) == 0 || name == "neck" || name == "head";
        out.push_back(stiff ? 45.0 : 90.0);
    }
    return out;
}

void ManifoldSpec::validate(const Skeleton& s) const {
    if (intrinsic_dim < 1 || intrinsic_dim > 16) fail(ErrorKind::invalid_argument, "manifold: intrinsic dimension must lie in [1, 16]");
    if (!joint_limit_deg.empty() && joint_limit_deg.size() != s.joint_count())
        fail(ErrorKind::invalid_argument, "manifold: one joint limit per joint required");
    for (double l : joint_limit_deg) {
        if (!(l > 0.0 && l <= 180.0)) fail(ErrorKind::invalid_argument, "manifold: joint limits must lie in (0, 180]");
    }
    if (!(weight_scale > 0.0) || !(omega_min > 0.0) || !(omega_max >= omega_min))
        fail(ErrorKind::invalid_argument, "manifold: invalid weight scale or frequency range");
    if (!(weight_decay > 0.0 && weight_decay <= 1.0)) fail(ErrorKind::invalid_argument, "manifold: weight decay must lie in (0, 1]");
}

ManifoldParams ManifoldParams::derive(const ManifoldSpec& spec, const Skeleton& s) {
    spec.validate(s);
    Rng rng = Rng::derive(spec.seed, "manifold-params");
    const auto limits = spec.joint_limit_deg.empty() ? ManifoldSpec::default_joint_limits(s) : spec.joint_limit_deg;
    const auto m = static_cast<std::size_t>(spec.intrinsic_dim);
    ManifoldParams p;
    for (std::size_t j = 0; j < s.joint_count(); ++j) {
        // Uniform direction: rejection sample the unit ball, then normalize.
        Vec3 a;
        double n2;
        do {
            a = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
            n2 = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
        } while (n2 > 1.0 || n2 < 1e-6);
        const double n = std::sqrt(n2);
        p.axes.push_back({a[0] / n, a[1] / n, a[2] / n});
        p.limit_rad.push_back(limits[j] * std::numbers::pi / 180.0);
        std::vector<double> w(m), om(m), ph(m);
        double scale = spec.weight_scale;
        for (std::size_t k = 0; k < m; ++k, scale *= spec.weight_decay) {
            w[k] = rng.uniform(-scale, scale);
            om[k] = rng.uniform(spec.omega_min, spec.omega_max);
            ph[k] = rng.uniform(-std::numbers::pi, std::numbers::pi);
        }
        p.weight.push_back(std::move(w));
        p.omega.push_back(std::move(om));
        p.phase.push_back(std::move(ph));
    }
    return p;
}

std::vector<double> ManifoldParams::angles_at(std::span<const double> u) const {
    std::vector<double> out(axes.size());
    for (std::size_t j = 0; j < axes.size(); ++j) {
        if (u.size() != weight[j].size()) fail(ErrorKind::invalid_argument, "manifold: latent dimension mismatch");
        double acc = 0.0;
        for (std::size_t k = 0; k < u.size(); ++k) acc += weight[j][k] * std::sin(omega[j][k] * u[k] + phase[j][k]);
        out[j] = limit_rad[j] * std::tanh(acc);
    }
    return out;
}

Pose ManifoldParams::pose_at(std::span<const double> u, const std::string& skeleton_id) const {
    const auto theta = angles_at(u);
    Pose p{skeleton_id, {}};
    p.joints.reserve(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) {
        const double h = theta[j] / 2.0;
        const double s = std::sin(h);
        p.joints.push_back(canonicalize({std::cos(h), axes[j][0] * s, axes[j][1] * s, axes[j][2] * s}));
    }
    return p;
}

PoseDataset generate_manifold(const ManifoldSpec& spec, std::size_t n, const Skeleton& s) {
    if (n < 1) fail(ErrorKind::invalid_argument, "generate_manifold: n must be >= 1");
    const ManifoldParams params = ManifoldParams::derive(spec, s);
    Rng rng = Rng::derive(spec.seed, "manifold-samples");
    PoseDataset ds;
    ds.skeleton_id = s.name;
    ds.poses.reserve(n);
    std::vector<double> u(static_cast<std::size_t>(spec.intrinsic_dim));
    for (std::size_t i = 0; i < n; ++i) {
        for (double& v : u) v = rng.uniform(-1.0, 1.0);
        ds.poses.push_back(params.pose_at(u, s.name));
    }
    std::ostringstream prov;
    prov << "manifold seed=" << spec.seed << " m=" << spec.intrinsic_dim << " n=" << n;
    ds.provenance = prov.str();
    return ds;
}

double manifold_distance(const Pose& p, std::span<const Pose> reference) {
    if (reference.empty()) fail(ErrorKind::invalid_argument, "manifold_distance: empty reference");
    // Per-joint sums in mpjae_deg order; a candidate is dropped once its partial sum exceeds the best.
    const std::size_t n = p.joints.size();
    double best = std::numeric_limits<double>::infinity();
    for (const auto& r : reference) {
        if (r.skeleton_id != p.skeleton_id || r.joints.size() != n) fail(ErrorKind::mismatch, "manifold_distance: poses are bound to different skeletons");
        double sum = 0.0;
        for (std::size_t j = 0; j < n && sum <= best; ++j) sum += geodesic_angle_deg(p.joints[j], r.joints[j]);
        if (sum < best) best = sum;
    }
    return n == 0 ? 0.0 : best / static_cast<double>(n);
}

double manifold_distance(const Pose& p, const PoseDataset& reference) { return manifold_distance(p, std::span<const Pose>(reference.poses)); }

// ---------------------------------------------------------------------------
// Split

void SplitSpec::validate() const {
    if (!(train > 0.0 && val > 0.0 && test > 0.0) || std::abs(train + val + test - 1.0) > 1e-9)
        fail(ErrorKind::invalid_argument, "split fractions must be positive and sum to 1");
}

Splits split(const PoseDataset& ds, const SplitSpec& s) {
    s.validate();
    const std::size_t n = ds.size();
    if (n < 10) fail(ErrorKind::invalid_argument, "split: dataset needs at least 10 poses");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng = Rng::derive(s.seed, "split");
    for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_index(i + 1)]);

    const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * s.train));
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * s.val));
    if (n_train + n_val >= n) fail(ErrorKind::invalid_argument, "split: fractions leave the test partition empty");

    Splits out;
    for (PoseDataset* part : {&out.train, &out.val, &out.test}) {
        part->skeleton_id = ds.skeleton_id;
        part->provenance = ds.provenance;
    }
    out.train.provenance += " [train]";
    out.val.provenance += " [val]";
    out.test.provenance += " [test]";
    for (std::size_t i = 0; i < n; ++i) {
        PoseDataset& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
        dst.poses.push_back(ds.poses[order[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Files

PoseFileFormat format_for_path(const std::filesystem::path& path) {
    return path.extension() == ".qpse" ? PoseFileFormat::qpse : PoseFileFormat::jsonl;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::not_found, "cannot open pose file " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::not_found, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::format, "write failed for " + path.string());
}

Pose pose_from_components(const std::vector<double>& c, const Skeleton& s, const std::string& where) {
    for (double v : c) {
        if (!std::isfinite(v)) fail(ErrorKind::format, where + ": non-finite quaternion component");
    }
    try {
        return Pose::from_flat(s.name, c.data(), s.joint_count());
    } catch (const Error& e) {
        fail(ErrorKind::format, where + ": " + e.what());
    }
}

}  // namespace

void save_poses(const std::filesystem::path& path, const PoseDataset& ds) { save_poses(path, ds, format_for_path(path)); }

void save_poses(const std::filesystem::path& path, const PoseDataset& ds, PoseFileFormat fmt) {
    const std::size_t joints = ds.poses.empty() ? 0 : ds.poses.front().size();
    for (const auto& p : ds.poses) {
        if (p.size() != joints) fail(ErrorKind::invalid_argument, "save_poses: inconsistent joint counts");
    }
    std::string bytes;
    if (fmt == PoseFileFormat::qpse) {
        bytes.reserve(kQpseHeaderBytes + ds.size() * joints * 16);
        bytes += "QPSE";
        put_u32(bytes, kQpseVersion);
        put_u32(bytes, static_cast<std::uint32_t>(joints));
        put_u32(bytes, 0);
        put_u64(bytes, ds.size());
        for (const auto& p : ds.poses) {
            for (const auto& q : p.joints) {
                for (double c : q.components()) put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(c)));
            }
        }
    } else {
        for (const auto& p : ds.poses) {
            nlohmann::json line = nlohmann::json::array();
            for (const auto& q : p.joints) line.push_back(q.components());
            bytes += line.dump();
            bytes += '\n';
        }
    }
    write_file(path, bytes);
}

PoseDataset load_poses(const std::filesystem::path& path, const Skeleton& s) {
    const std::string bytes = read_file(path);
    PoseDataset ds;
    ds.skeleton_id = s.name;
    ds.provenance = "file " + path.filename().string();
    const std::size_t nj = s.joint_count();

    if (bytes.size() >= 4 && bytes.compare(0, 4, "QPSE") == 0) {
        if (bytes.size() < kQpseHeaderBytes) fail(ErrorKind::format, path.string() + ": truncated QPSE header");
        const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
        const std::uint32_t version = get_u32(u + 4);
        const std::uint32_t joints = get_u32(u + 8);
        const std::uint64_t count = get_u64(u + 16);
        if (version != kQpseVersion) fail(ErrorKind::format, path.string() + ": unsupported QPSE version " + std::to_string(version));
        if (joints != nj) fail(ErrorKind::mismatch, path.string() + ": file has " + std::to_string(joints) + " joints, skeleton " + std::to_string(nj));
        const std::size_t per_pose = static_cast<std::size_t>(joints) * 16;
        if (count > (bytes.size() - kQpseHeaderBytes) / std::max<std::size_t>(per_pose, 1) ||
            bytes.size() != kQpseHeaderBytes + count * per_pose)
            fail(ErrorKind::format, path.string() + ": truncated or oversized QPSE payload");
        std::vector<double> c(4 * nj);
        ds.poses.reserve(static_cast<std::size_t>(count));
        for (std::uint64_t i = 0; i < count; ++i) {
            const unsigned char* base = u + kQpseHeaderBytes + i * per_pose;
            for (std::size_t k = 0; k < 4 * nj; ++k) c[k] = static_cast<double>(std::bit_cast<float>(get_u32(base + 4 * k)));
            ds.poses.push_back(pose_from_components(c, s, path.string() + " pose " + std::to_string(i)));
        }
        return ds;
    }

    // JSON lines; anything that starts like a binary container is rejected here.
    std::istringstream in(bytes);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorKind::format, where + ": not a pose line (" + e.what() + ")");
        }
        if (j.is_object() && j.contains("joints")) j = j["joints"];
        if (!j.is_array() || j.size() != nj) fail(ErrorKind::format, where + ": expected " + std::to_string(nj) + " quaternions");
        std::vector<double> c;
        c.reserve(4 * nj);
        for (const auto& q : j) {
            if (!q.is_array() || q.size() != 4) fail(ErrorKind::format, where + ": each joint needs 4 components");
            for (const auto& v : q) {
                if (!v.is_number()) fail(ErrorKind::format, where + ": non-numeric component");
                c.push_back(v.get<double>());
            }
        }
        ds.poses.push_back(pose_from_components(c, s, where));
    }
    if (ds.poses.empty()) fail(ErrorKind::format, path.string() + ": no poses");
    return ds;
}

}  // namespace qposer
