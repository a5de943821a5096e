// SPDX-License-Identifier: Apache-2.0
#include "qposer/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "qposer/error.hpp"

namespace qposer {

// ---------------------------------------------------------------------------
// PartLayout

int PartLayout::part_slot_count() const {
    int n = 0;
    for (const auto& p : parts) n += p.head_count;
    return n;
}

int PartLayout::part_index(const std::string& name) const {
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].name == name) return static_cast<int>(i);
    }
    return -1;
}

int PartLayout::codebook_index(const std::string& id) const {
    for (std::size_t i = 0; i < codebooks.size(); ++i) {
        if (codebooks[i].id == id) return static_cast<int>(i);
    }
    return -1;
}

int PartLayout::first_slot_of_part(int p) const {
    int s = 0;
    for (int i = 0; i < p; ++i) s += parts[static_cast<std::size_t>(i)].head_count;
    return s;
}

void PartLayout::validate(const Skeleton& s) const {
    if (d_code < 1) fail(ErrorKind::invalid_argument, "layout: d_code must be >= 1");
    if (parts.empty()) fail(ErrorKind::invalid_argument, "layout: no parts");
    std::set<std::string> ids;
    for (const auto& cb : codebooks) {
        if (cb.size < 1) fail(ErrorKind::invalid_argument, "layout: codebook " + cb.id + " must have >= 1 code");
        if (!ids.insert(cb.id).second) fail(ErrorKind::invalid_argument, "layout: duplicate codebook id " + cb.id);
    }
    std::set<std::string> names;
    std::vector<int> owner(s.joint_count(), -1);
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& part = parts[p];
        if (!names.insert(part.name).second) fail(ErrorKind::invalid_argument, "layout: duplicate part name " + part.name);
        if (part.head_count < 1) fail(ErrorKind::invalid_argument, "layout: part " + part.name + " needs >= 1 head");
        if (codebook_index(part.codebook_id) < 0)
            fail(ErrorKind::invalid_argument, "layout: part " + part.name + " uses unknown codebook " + part.codebook_id);
        if (part.joint_indices.empty()) fail(ErrorKind::invalid_argument, "layout: part " + part.name + " owns no joints");
        if (!std::is_sorted(part.joint_indices.begin(), part.joint_indices.end()))
            fail(ErrorKind::invalid_argument, "layout: joint indices of " + part.name + " must be ascending");
        for (int j : part.joint_indices) {
            if (j < 0 || j >= static_cast<int>(s.joint_count()))
                fail(ErrorKind::invalid_argument, "layout: part " + part.name + " has joint index out of range");
            if (owner[static_cast<std::size_t>(j)] >= 0)
                fail(ErrorKind::invalid_argument, "layout: joint " + s.joint_names[static_cast<std::size_t>(j)] + " assigned twice");
            owner[static_cast<std::size_t>(j)] = static_cast<int>(p);
        }
    }
    for (std::size_t j = 0; j < owner.size(); ++j) {
        if (owner[j] < 0) fail(ErrorKind::invalid_argument, "layout: joint " + s.joint_names[j] + " belongs to no part");
    }
    if (global_head_count < 0) fail(ErrorKind::invalid_argument, "layout: negative global head count");
    if (global_head_count > 0 && codebook_index(global_codebook_id) < 0)
        fail(ErrorKind::invalid_argument, "layout: global group uses unknown codebook " + global_codebook_id);
}

namespace {

PartLayout body_layout(const Skeleton& s, int head, int torso, int limb, int global, int k_small, int k_large, int d) {
    const char* part_books[] = {"head", "torso", "arms", "arms", "legs", "legs"};
    const char* part_names[] = {"Head", "Torso", "LeftArm", "RightArm", "LeftLeg", "RightLeg"};
    const int heads[] = {head, torso, limb, limb, limb, limb};
    PartLayout l;
    l.d_code = d;
    l.codebooks = {{"head", k_small}, {"torso", k_large}, {"arms", k_large}, {"legs", k_large}, {"global", k_small}};
    for (int i = 0; i < 6; ++i) {
        const int p = s.part_index(part_names[i]);
        if (p < 0) fail(ErrorKind::invalid_argument, std::string("skeleton lacks part ") + part_names[i]);
        l.parts.push_back({part_names[i], heads[i], part_books[i], s.joints_of_part(static_cast<std::size_t>(p))});
    }
    l.global_head_count = global;
    l.global_codebook_id = "global";
    l.validate(s);
    return l;
}

}  // namespace

PartLayout PartLayout::full(const Skeleton& s) { return body_layout(s, 3, 12, 12, 3, 8, 32, 16); }

PartLayout PartLayout::desk(const Skeleton& s) { return body_layout(s, 2, 4, 4, 2, 8, 16, 8); }

PartLayout PartLayout::desk_heads(const Skeleton& s, int heads_per_part, int global_heads) {
    return body_layout(s, heads_per_part, heads_per_part, heads_per_part, global_heads, 8, 16, 8);
}

PartLayout PartLayout::single_group(const Skeleton& s, int heads, int codebook_size, int d_code) {
    PartLayout l;
    l.d_code = d_code;
    l.codebooks = {{"body", codebook_size}};
    std::vector<int> all(s.joint_count());
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
    l.parts.push_back({"Body", heads, "body", all});
    l.validate(s);
    return l;
}

nlohmann::json PartLayout::to_json() const {
    nlohmann::json j;
    j["d_code"] = d_code;
    j["codebooks"] = nlohmann::json::array();
    for (const auto& cb : codebooks) j["codebooks"].push_back({{"id", cb.id}, {"size", cb.size}});
    j["parts"] = nlohmann::json::array();
    for (const auto& p : parts)
        j["parts"].push_back({{"name", p.name}, {"head_count", p.head_count}, {"codebook", p.codebook_id}, {"joints", p.joint_indices}});
    j["global"] = {{"head_count", global_head_count}, {"codebook", global_codebook_id}};
    return j;
}

PartLayout PartLayout::from_json(const nlohmann::json& j, const Skeleton& s) {
    PartLayout l;
    try {
        l.d_code = j.at("d_code").get<int>();
        for (const auto& cb : j.at("codebooks")) l.codebooks.push_back({cb.at("id").get<std::string>(), cb.at("size").get<int>()});
        for (const auto& p : j.at("parts")) {
            PartSpec part{p.at("name").get<std::string>(), p.at("head_count").get<int>(), p.at("codebook").get<std::string>(), {}};
            if (p.contains("joints")) {
                part.joint_indices = p.at("joints").get<std::vector<int>>();
            } else {
                const int idx = s.part_index(part.name);
                if (idx < 0) fail(ErrorKind::invalid_argument, "layout: part " + part.name + " not in skeleton and no joints given");
                part.joint_indices = s.joints_of_part(static_cast<std::size_t>(idx));
            }
            l.parts.push_back(std::move(part));
        }
        if (j.contains("global")) {
            l.global_head_count = j.at("global").at("head_count").get<int>();
            l.global_codebook_id = j.at("global").value("codebook", std::string());
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("layout json: ") + e.what());
    }
    l.validate(s);
    return l;
}

// ---------------------------------------------------------------------------
// QPoserModel

int QPoserModel::codebook_of_slot(int slot) const {
    const int p = part_of_slot(slot);
    const std::string& id = p >= 0 ? layout.parts[static_cast<std::size_t>(p)].codebook_id : layout.global_codebook_id;
    return layout.codebook_index(id);
}

int QPoserModel::part_of_slot(int slot) const {
    int s = slot;
    for (std::size_t p = 0; p < layout.parts.size(); ++p) {
        if (s < layout.parts[p].head_count) return static_cast<int>(p);
        s -= layout.parts[p].head_count;
    }
    return -1;
}

const MlpParams& QPoserModel::encoder_of_slot(int slot) const {
    int s = slot;
    for (std::size_t p = 0; p < layout.parts.size(); ++p) {
        if (s < layout.parts[p].head_count) return part_encoders[p][static_cast<std::size_t>(s)];
        s -= layout.parts[p].head_count;
    }
    return global_encoders.at(static_cast<std::size_t>(s));
}

std::vector<MlpParams*> QPoserModel::mlps() {
    std::vector<MlpParams*> out;
    for (auto& heads : part_encoders)
        for (auto& e : heads) out.push_back(&e);
    for (auto& e : global_encoders) out.push_back(&e);
    for (auto& d : part_decoders) out.push_back(&d);
    return out;
}

std::vector<const MlpParams*> QPoserModel::mlps() const {
    std::vector<const MlpParams*> out;
    for (const auto& heads : part_encoders)
        for (const auto& e : heads) out.push_back(&e);
    for (const auto& e : global_encoders) out.push_back(&e);
    for (const auto& d : part_decoders) out.push_back(&d);
    return out;
}

std::size_t QPoserModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : mlps()) n += p->parameter_count();
    return n;
}

std::uint64_t QPoserModel::compute_fingerprint() const {
    std::uint64_t h = fnv1a(layout.to_json().dump());
    h = fnv1a(skeleton.to_json().dump(), h);
    h = fnv1a(nlohmann::json{{"widths", hidden.widths}, {"activation", to_string(hidden.activation)}}.dump(), h);
    auto bytes = [&h](const double* data, std::size_t n) {
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(data), n * sizeof(double)), h);
    };
    for (const auto* p : mlps()) {
        for (const auto& blk : p->blocks()) bytes(blk.data(), blk.size());
    }
    for (const auto& cb : codebooks) bytes(cb.codes.data(), static_cast<std::size_t>(cb.codes.size()));
    return h;
}

void QPoserModel::refresh_fingerprint() { fingerprint = compute_fingerprint(); }

QPoserModel build_model(const PartLayout& layout, const Skeleton& skeleton, const HiddenSpec& hidden, std::uint64_t seed) {
    skeleton.validate();
    layout.validate(skeleton);
    for (int w : hidden.widths) {
        if (w < 1) fail(ErrorKind::invalid_argument, "hidden widths must be positive");
    }
    QPoserModel m;
    m.layout = layout;
    m.skeleton = skeleton;
    m.hidden = hidden;
    Rng rng = Rng::derive(seed, "init");

    const int in = 4 * static_cast<int>(skeleton.joint_count());
    auto spec = [&](int input, int output) {
        MlpSpec s;
        s.layer_widths.push_back(input);
        s.layer_widths.insert(s.layer_widths.end(), hidden.widths.begin(), hidden.widths.end());
        s.layer_widths.push_back(output);
        s.activation = hidden.activation;
        return s;
    };
    for (const auto& part : layout.parts) {
        std::vector<MlpParams> heads;
        for (int h = 0; h < part.head_count; ++h) heads.push_back(MlpParams::init(spec(in, layout.d_code), rng));
        m.part_encoders.push_back(std::move(heads));
    }
    for (int h = 0; h < layout.global_head_count; ++h) m.global_encoders.push_back(MlpParams::init(spec(in, layout.d_code), rng));
    for (const auto& cb : layout.codebooks) m.codebooks.push_back(Codebook::random(cb.id, cb.size, layout.d_code, rng, 0.5));
    for (const auto& part : layout.parts) {
        const int dec_in = (part.head_count + layout.global_head_count) * layout.d_code;
        MlpParams dec = MlpParams::init(spec(dec_in, 4 * static_cast<int>(part.joint_indices.size())), rng);
        // Output bias starts at the identity rotation for every joint.
        Vector& bias = dec.layers.back().bias;
        for (Eigen::Index i = 0; i < bias.size(); i += 4) bias[i] = 1.0;
        m.part_decoders.push_back(std::move(dec));
    }
    m.refresh_fingerprint();
    return m;
}

// ---------------------------------------------------------------------------
// Batch paths

namespace {

void check_pose(const QPoserModel& m, const Pose& p) {
    if (p.skeleton_id != m.skeleton.name || p.joints.size() != m.skeleton.joint_count())
        fail(ErrorKind::mismatch, "pose is bound to skeleton '" + p.skeleton_id + "' but the model uses '" + m.skeleton.name + "'");
}

Tensor concat_decoder_input(const QPoserModel& m, int p, const std::vector<Tensor>& slots) {
    const auto& layout = m.layout;
    const int d = layout.d_code;
    const int hp = layout.parts[static_cast<std::size_t>(p)].head_count;
    const int first = layout.first_slot_of_part(p);
    const int global0 = layout.part_slot_count();
    const Eigen::Index n = slots.front().rows();
    Tensor in(n, (hp + layout.global_head_count) * d);
    int col = 0;
    for (int h = 0; h < hp; ++h, col += d) in.middleCols(col, d) = slots[static_cast<std::size_t>(first + h)];
    for (int g = 0; g < layout.global_head_count; ++g, col += d) in.middleCols(col, d) = slots[static_cast<std::size_t>(global0 + g)];
    return in;
}

void scatter_part(const QPoserModel& m, int p, const Tensor& part_out, Tensor& raw) {
    const auto& joints = m.layout.parts[static_cast<std::size_t>(p)].joint_indices;
    for (std::size_t r = 0; r < joints.size(); ++r) raw.middleCols(4 * joints[r], 4) = part_out.middleCols(4 * static_cast<Eigen::Index>(r), 4);
}

Tensor gather_part(const QPoserModel& m, int p, const Tensor& raw) {
    const auto& joints = m.layout.parts[static_cast<std::size_t>(p)].joint_indices;
    Tensor out(raw.rows(), 4 * static_cast<Eigen::Index>(joints.size()));
    for (std::size_t r = 0; r < joints.size(); ++r) out.middleCols(4 * static_cast<Eigen::Index>(r), 4) = raw.middleCols(4 * joints[r], 4);
    return out;
}

}  // namespace

Tensor poses_to_matrix(std::span<const Pose> poses) {
    if (poses.empty()) return Tensor(0, 0);
    const std::size_t n = poses.front().joints.size();
    Tensor x(static_cast<Eigen::Index>(poses.size()), static_cast<Eigen::Index>(4 * n));
    for (std::size_t i = 0; i < poses.size(); ++i) {
        if (poses[i].joints.size() != n) fail(ErrorKind::mismatch, "poses_to_matrix: joint count differs within batch");
        poses[i].flatten_into(x.data() + static_cast<std::ptrdiff_t>(i) * x.cols());
    }
    return x;
}

std::vector<Tensor> encode_batch(const QPoserModel& m, const Tensor& x) {
    std::vector<Tensor> z;
    z.reserve(static_cast<std::size_t>(m.slot_count()));
    for (int s = 0; s < m.slot_count(); ++s) z.push_back(mlp_apply(m.encoder_of_slot(s), x));
    return z;
}

std::vector<std::vector<int>> quantize_batch(const QPoserModel& m, const std::vector<Tensor>& z) {
    std::vector<std::vector<int>> idx(z.size());
    for (std::size_t s = 0; s < z.size(); ++s) {
        const Codebook& cb = m.codebooks[static_cast<std::size_t>(m.codebook_of_slot(static_cast<int>(s)))];
        idx[s].resize(static_cast<std::size_t>(z[s].rows()));
        for (Eigen::Index r = 0; r < z[s].rows(); ++r) idx[s][static_cast<std::size_t>(r)] = nearest_code(z[s].data() + r * z[s].cols(), cb);
    }
    return idx;
}

std::vector<Tensor> lookup_codes(const QPoserModel& m, const std::vector<std::vector<int>>& indices) {
    std::vector<Tensor> out(indices.size());
    for (std::size_t s = 0; s < indices.size(); ++s) {
        const Codebook& cb = m.codebooks[static_cast<std::size_t>(m.codebook_of_slot(static_cast<int>(s)))];
        out[s].resize(static_cast<Eigen::Index>(indices[s].size()), cb.dim());
        for (std::size_t r = 0; r < indices[s].size(); ++r) out[s].row(static_cast<Eigen::Index>(r)) = cb.codes.row(indices[s][r]);
    }
    return out;
}

Tensor decode_batch_raw(const QPoserModel& m, const std::vector<Tensor>& slot_inputs) {
    if (static_cast<int>(slot_inputs.size()) != m.slot_count()) fail(ErrorKind::invalid_argument, "decode: slot count mismatch");
    const Eigen::Index n = slot_inputs.front().rows();
    for (const auto& t : slot_inputs) {
        if (t.rows() != n || t.cols() != m.layout.d_code) fail(ErrorKind::invalid_argument, "decode: slot shape mismatch");
    }
    Tensor raw(n, 4 * static_cast<Eigen::Index>(m.skeleton.joint_count()));
    for (int p = 0; p < static_cast<int>(m.layout.parts.size()); ++p) {
        const Tensor out = mlp_apply(m.part_decoders[static_cast<std::size_t>(p)], concat_decoder_input(m, p, slot_inputs));
        scatter_part(m, p, out, raw);
    }
    return raw;
}

std::vector<Pose> matrix_to_poses(const QPoserModel& m, const Tensor& raw) {
    std::vector<Pose> out;
    out.reserve(static_cast<std::size_t>(raw.rows()));
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        try {
            out.push_back(Pose::from_flat(m.skeleton.name, raw.data() + r * raw.cols(), m.skeleton.joint_count()));
        } catch (const Error& e) {
            fail(ErrorKind::numeric, std::string("decoder produced an invalid quaternion: ") + e.what());
        }
    }
    return out;
}

std::vector<Pose> reconstruct_batch(const QPoserModel& m, std::span<const Pose> poses) {
    if (poses.empty()) return {};
    for (const auto& p : poses) check_pose(m, p);
    const auto z = encode_batch(m, poses_to_matrix(poses));
    return matrix_to_poses(m, decode_batch_raw(m, lookup_codes(m, quantize_batch(m, z))));
}

// ---------------------------------------------------------------------------
// Single-pose operations

Encoding encode(const QPoserModel& m, const Pose& p) {
    check_pose(m, p);
    const Tensor x = poses_to_matrix(std::span<const Pose>(&p, 1));
    const auto z = encode_batch(m, x);
    Encoding e;
    e.continuous.slots.resize(m.slot_count(), m.layout.d_code);
    e.code.fingerprint = m.fingerprint;
    e.code.indices.resize(static_cast<std::size_t>(m.slot_count()));
    for (int s = 0; s < m.slot_count(); ++s) {
        e.continuous.slots.row(s) = z[static_cast<std::size_t>(s)].row(0);
        const Codebook& cb = m.codebooks[static_cast<std::size_t>(m.codebook_of_slot(s))];
        e.code.indices[static_cast<std::size_t>(s)] = quantize(std::span<const double>(z[static_cast<std::size_t>(s)].data(), static_cast<std::size_t>(cb.dim())), cb).index;
    }
    return e;
}

LatentCode encode_code(const QPoserModel& m, const Pose& p) { return encode(m, p).code; }

void check_latent(const QPoserModel& m, const LatentCode& c) {
    if (c.fingerprint != m.fingerprint)
        fail(ErrorKind::mismatch, "latent fingerprint " + fingerprint_hex(c.fingerprint) + " does not match model " + fingerprint_hex(m.fingerprint));
    if (static_cast<int>(c.indices.size()) != m.slot_count())
        fail(ErrorKind::invalid_argument, "latent has " + std::to_string(c.indices.size()) + " slots, model expects " + std::to_string(m.slot_count()));
    for (int s = 0; s < m.slot_count(); ++s) {
        const int k = m.codebooks[static_cast<std::size_t>(m.codebook_of_slot(s))].size();
        const int idx = c.indices[static_cast<std::size_t>(s)];
        if (idx < 0 || idx >= k)
            fail(ErrorKind::invalid_argument, "code index " + std::to_string(idx) + " in slot " + std::to_string(s) + " outside codebook of size " + std::to_string(k));
    }
}

Pose decode_quantized(const QPoserModel& m, const LatentCode& c) {
    check_latent(m, c);
    std::vector<std::vector<int>> idx(c.indices.size());
    for (std::size_t s = 0; s < idx.size(); ++s) idx[s] = {c.indices[s]};
    return matrix_to_poses(m, decode_batch_raw(m, lookup_codes(m, idx))).front();
}

Pose decode_continuous(const QPoserModel& m, const ContinuousLatent& z) {
    if (z.slots.rows() != m.slot_count() || z.slots.cols() != m.layout.d_code)
        fail(ErrorKind::invalid_argument, "continuous latent shape mismatch");
    for (Eigen::Index i = 0; i < z.slots.size(); ++i) {
        if (!std::isfinite(z.slots.data()[i])) fail(ErrorKind::invalid_argument, "continuous latent has non-finite entries");
    }
    std::vector<Tensor> slots(static_cast<std::size_t>(m.slot_count()));
    for (int s = 0; s < m.slot_count(); ++s) slots[static_cast<std::size_t>(s)] = z.slots.row(s);
    return matrix_to_poses(m, decode_batch_raw(m, slots)).front();
}

Pose reconstruct(const QPoserModel& m, const Pose& p) { return decode_quantized(m, encode_code(m, p)); }

std::vector<Pose> interpolate(const QPoserModel& m, const Pose& a, const Pose& b, int steps) {
    if (steps < 2) fail(ErrorKind::invalid_argument, "interpolate: steps must be >= 2");
    const Tensor za = encode(m, a).continuous.slots;
    const Tensor zb = encode(m, b).continuous.slots;
    const Tensor diff = zb - za;
    std::vector<Pose> frames;
    frames.reserve(static_cast<std::size_t>(steps));
    for (int k = 0; k < steps; ++k) {
        ContinuousLatent z;
        if (k == 0) {
            z.slots = za;
        } else if (k == steps - 1) {
            z.slots = zb;
        } else {
            const double t = static_cast<double>(k) / static_cast<double>(steps - 1);
            z.slots = za + t * diff;
        }
        frames.push_back(decode_continuous(m, z));
    }
    return frames;
}

Sample sample(const QPoserModel& m, Rng& rng) {
    Sample s;
    s.code.fingerprint = m.fingerprint;
    s.code.indices.resize(static_cast<std::size_t>(m.slot_count()));
    for (int slot = 0; slot < m.slot_count(); ++slot)
        s.code.indices[static_cast<std::size_t>(slot)] = sample_code(m.codebooks[static_cast<std::size_t>(m.codebook_of_slot(slot))], rng);
    s.pose = decode_quantized(m, s.code);
    return s;
}

LatentCode modify_part(const QPoserModel& m, const LatentCode& base, const std::string& part_name, const LatentCode& source) {
    const int p = m.layout.part_index(part_name);
    if (p < 0) {
        std::string valid;
        for (const auto& part : m.layout.parts) valid += (valid.empty() ? "" : ", ") + part.name;
        fail(ErrorKind::not_found, "unknown part '" + part_name + "' (valid: " + valid + ")");
    }
    check_latent(m, base);
    check_latent(m, source);
    LatentCode out = base;
    const int first = m.layout.first_slot_of_part(p);
    for (int h = 0; h < m.layout.parts[static_cast<std::size_t>(p)].head_count; ++h)
        out.indices[static_cast<std::size_t>(first + h)] = source.indices[static_cast<std::size_t>(first + h)];
    return out;
}

std::vector<double> iterate_roundtrip(const QPoserModel& m, const Pose& p, int k) {
    if (k < 1) fail(ErrorKind::invalid_argument, "iterate_roundtrip: k must be >= 1");
    std::vector<double> errors;
    errors.reserve(static_cast<std::size_t>(k));
    Pose current = p;
    LatentCode last;
    for (int i = 0; i < k; ++i) {
        const LatentCode c = encode_code(m, current);
        // Fixed point: every later iteration repeats this error.
        if (i > 0 && c == last) {
            errors.resize(static_cast<std::size_t>(k), errors.back());
            break;
        }
        current = decode_quantized(m, c);
        last = c;
        errors.push_back(mpjae_deg(p, current));
    }
    return errors;
}

// ---------------------------------------------------------------------------
// Loss and gradients

ModelGrads ModelGrads::zeros_like(const QPoserModel& m) {
    ModelGrads g;
    for (const auto* p : m.mlps()) g.mlps.push_back(MlpParams::zeros(p->spec));
    return g;
}

std::vector<std::span<const double>> ModelGrads::blocks() const {
    std::vector<std::span<const double>> out;
    for (const auto& g : mlps) {
        auto b = g.blocks();
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

std::vector<double> ModelGrads::flatten() const {
    std::vector<double> out;
    for (const auto& b : blocks()) out.insert(out.end(), b.begin(), b.end());
    return out;
}

std::vector<std::span<double>> parameter_blocks(QPoserModel& m) {
    std::vector<std::span<double>> out;
    for (auto* p : m.mlps()) {
        auto b = p->blocks();
        out.insert(out.end(), b.begin(), b.end());
    }
    return out;
}

QuantizationAnchor anchor_of(const QPoserModel& m, const LossResult& at) {
    QuantizationAnchor a;
    a.codes = lookup_codes(m, at.indices);
    for (std::size_t s = 0; s < a.codes.size(); ++s) a.offset.push_back(a.codes[s] - at.z[s]);
    return a;
}

LossResult loss_and_grads(const QPoserModel& m, const Tensor& x, double lambda, bool want_grads, const QuantizationAnchor* anchor) {
    if (x.rows() == 0) fail(ErrorKind::invalid_argument, "loss_and_grads: empty batch");
    if (x.cols() != 4 * static_cast<Eigen::Index>(m.skeleton.joint_count())) fail(ErrorKind::invalid_argument, "loss_and_grads: batch width mismatch");
    const int slots = m.slot_count();
    const auto n = static_cast<double>(x.rows());
    LossResult r;

    // Encoders.
    std::vector<MlpOutput> enc;
    enc.reserve(static_cast<std::size_t>(slots));
    for (int s = 0; s < slots; ++s) enc.push_back(mlp_forward(m.encoder_of_slot(s), x));
    r.z.reserve(static_cast<std::size_t>(slots));
    for (auto& e : enc) r.z.push_back(e.output);
    r.indices = quantize_batch(m, r.z);
    std::vector<Tensor> zq;
    std::vector<Tensor> dec_in;
    if (anchor) {
        if (anchor->codes.size() != static_cast<std::size_t>(slots) || anchor->offset.size() != static_cast<std::size_t>(slots))
            fail(ErrorKind::invalid_argument, "loss_and_grads: anchor slot count mismatch");
        zq = anchor->codes;
        for (int s = 0; s < slots; ++s) dec_in.push_back(r.z[static_cast<std::size_t>(s)] + anchor->offset[static_cast<std::size_t>(s)]);
    } else {
        zq = lookup_codes(m, r.indices);
    }
    const std::vector<Tensor>& decoder_slots = anchor ? dec_in : zq;

    // Decoders.
    std::vector<MlpOutput> dec;
    Tensor raw(x.rows(), x.cols());
    for (int p = 0; p < static_cast<int>(m.layout.parts.size()); ++p) {
        dec.push_back(mlp_forward(m.part_decoders[static_cast<std::size_t>(p)], concat_decoder_input(m, p, decoder_slots)));
        scatter_part(m, p, dec.back().output, raw);
    }

    const Tensor residual = raw - x;
    r.recon = residual.squaredNorm() / static_cast<double>(residual.size());
    double commit_sum = 0.0;
    for (int s = 0; s < slots; ++s) commit_sum += (r.z[static_cast<std::size_t>(s)] - zq[static_cast<std::size_t>(s)]).squaredNorm();
    const double entries = n * slots;
    r.commit = commit_sum / entries;
    r.total = r.recon + lambda * r.commit;
    if (!std::isfinite(r.total))
        fail(ErrorKind::numeric, "training divergence: non-finite loss (recon " + std::to_string(r.recon) + ", commit " + std::to_string(r.commit) + ")");

    std::uint64_t sig = 0x51ED270B27A4B3C1ULL;
    if (!anchor) {
        for (const auto& slot : r.indices)
            for (int i : slot) sig = mix64(sig ^ static_cast<std::uint64_t>(i + 1));
    }
    for (const auto& e : enc) sig = activation_signature(e.cache, sig);
    for (const auto& d : dec) sig = activation_signature(d.cache, sig);
    r.signature = sig;
    if (!want_grads) return r;

    r.grads = ModelGrads::zeros_like(m);
    const std::size_t n_enc = static_cast<std::size_t>(slots);
    const Tensor d_raw = (2.0 / static_cast<double>(residual.size())) * residual;

    // Gradient on each quantized slot, gathered over every decoder that reads it.
    std::vector<Tensor> g_zq(n_enc);
    for (auto& g : g_zq) g = Tensor::Zero(x.rows(), m.layout.d_code);
    const int d = m.layout.d_code;
    const int global0 = m.layout.part_slot_count();
    for (int p = 0; p < static_cast<int>(m.layout.parts.size()); ++p) {
        const auto pi = static_cast<std::size_t>(p);
        const Tensor g_in = mlp_backward_accumulate(m.part_decoders[pi], dec[pi].cache, gather_part(m, p, d_raw), r.grads.mlps[n_enc + pi]);
        const int hp = m.layout.parts[pi].head_count;
        const int first = m.layout.first_slot_of_part(p);
        int col = 0;
        for (int h = 0; h < hp; ++h, col += d) g_zq[static_cast<std::size_t>(first + h)] += g_in.middleCols(col, d);
        for (int g = 0; g < m.layout.global_head_count; ++g, col += d) g_zq[static_cast<std::size_t>(global0 + g)] += g_in.middleCols(col, d);
    }

    // Straight-through plus commitment (z side only), then into the encoders.
    const double commit_scale = lambda * 2.0 / entries;
    for (std::size_t s = 0; s < n_enc; ++s) {
        Tensor g_z = straight_through(g_zq[s]);
        if (lambda != 0.0) g_z += commit_scale * (r.z[s] - zq[s]);
        const MlpParams& encoder = m.encoder_of_slot(static_cast<int>(s));
        mlp_backward_accumulate(encoder, enc[s].cache, g_z, r.grads.mlps[s]);
    }
    return r;
}

LossResult loss_and_grads(const QPoserModel& m, std::span<const Pose> batch, double lambda) {
    if (batch.empty()) fail(ErrorKind::invalid_argument, "loss_and_grads: empty batch");
    for (const auto& p : batch) check_pose(m, p);
    return loss_and_grads(m, poses_to_matrix(batch), lambda, true);
}

// ---------------------------------------------------------------------------
// Latent JSON

std::string fingerprint_hex(std::uint64_t fp) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

std::uint64_t parse_fingerprint_hex(const std::string& s) {
    if (s.empty() || s.size() > 16 || s.find_first_not_of("0123456789abcdefABCDEF") != std::string::npos)
        fail(ErrorKind::invalid_argument, "fingerprint must be 1-16 hex digits");
    return std::stoull(s, nullptr, 16);
}

nlohmann::json latent_to_json(const QPoserModel& m, const LatentCode& c) {
    check_latent(m, c);
    nlohmann::json parts = nlohmann::json::object();
    for (int p = 0; p < static_cast<int>(m.layout.parts.size()); ++p) {
        const auto& part = m.layout.parts[static_cast<std::size_t>(p)];
        const auto first = c.indices.begin() + m.layout.first_slot_of_part(p);
        parts[part.name] = std::vector<int>(first, first + part.head_count);
    }
    const auto g0 = c.indices.begin() + m.layout.part_slot_count();
    return {{"fingerprint", fingerprint_hex(c.fingerprint)}, {"parts", parts}, {"global", std::vector<int>(g0, c.indices.end())}};
}

LatentCode latent_from_json(const QPoserModel& m, const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorKind::invalid_argument, "latent must be a JSON object");
    LatentCode c;
    try {
        c.fingerprint = parse_fingerprint_hex(j.at("fingerprint").get<std::string>());
        c.indices.resize(static_cast<std::size_t>(m.slot_count()));
        const auto& parts = j.at("parts");
        if (!parts.is_object() || parts.size() != m.layout.parts.size())
            fail(ErrorKind::invalid_argument, "latent 'parts' must name exactly the model's parts");
        for (int p = 0; p < static_cast<int>(m.layout.parts.size()); ++p) {
            const auto& part = m.layout.parts[static_cast<std::size_t>(p)];
            if (!parts.contains(part.name)) fail(ErrorKind::invalid_argument, "latent lacks part " + part.name);
            const auto idx = parts.at(part.name).get<std::vector<int>>();
            if (static_cast<int>(idx.size()) != part.head_count)
                fail(ErrorKind::invalid_argument, "latent part " + part.name + " needs " + std::to_string(part.head_count) + " indices");
            std::copy(idx.begin(), idx.end(), c.indices.begin() + m.layout.first_slot_of_part(p));
        }
        const auto global = j.contains("global") ? j.at("global").get<std::vector<int>>() : std::vector<int>{};
        if (static_cast<int>(global.size()) != m.layout.global_head_count)
            fail(ErrorKind::invalid_argument, "latent 'global' needs " + std::to_string(m.layout.global_head_count) + " indices");
        std::copy(global.begin(), global.end(), c.indices.begin() + m.layout.part_slot_count());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::invalid_argument, std::string("latent json: ") + e.what());
    }
    check_latent(m, c);
    return c;
}

}  // namespace qposer
