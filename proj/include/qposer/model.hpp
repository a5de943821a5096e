// SPDX-License-Identifier: Apache-2.0
//
// The quantized pose autoencoder: per-part multi-head encoders plus a global
// (whole-body) encoder group, shared codebooks, and one decoder per part
// that reads its own codes followed by the global codes.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qposer/geometry.hpp"
#include "qposer/numerics.hpp"
#include "qposer/rng.hpp"
#include "qposer/vq.hpp"

namespace qposer {

struct CodebookSpec {
    std::string id;
    int size = 0;
    friend bool operator==(const CodebookSpec&, const CodebookSpec&) = default;
};

struct PartSpec {
    std::string name;
    int head_count = 0;
    std::string codebook_id;
    std::vector<int> joint_indices;  // ascending
    friend bool operator==(const PartSpec&, const PartSpec&) = default;
};

/// Slot order everywhere: part 0 heads, part 1 heads, ..., then global heads.
/// A global head count of 0 disables global conditioning entirely.
struct PartLayout {
    std::vector<PartSpec> parts;
    int global_head_count = 0;
    std::string global_codebook_id;
    std::vector<CodebookSpec> codebooks;
    int d_code = 0;

    int part_slot_count() const;
    int slot_count() const { return part_slot_count() + global_head_count; }
    bool has_global() const { return global_head_count > 0; }
    int part_index(const std::string& name) const;  // -1 if absent
    int codebook_index(const std::string& id) const;  // -1 if absent
    int first_slot_of_part(int p) const;

    /// Throws invalid_argument when the layout does not fit the skeleton.
    void validate(const Skeleton& s) const;

    /// Head 3, torso/arms/legs 12 each, global 3; 8-code head and global
    /// books, 32-code torso/arms/legs books with arms and legs shared; d_code 16.
    static PartLayout full(const Skeleton& s);
    /// Head 2, torso/limbs 4, global 2; K 8/16; d_code 8.
    static PartLayout desk(const Skeleton& s);
    /// Same as desk but `heads` per part and global.
    static PartLayout desk_heads(const Skeleton& s, int heads_per_part, int global_heads);
    /// Single undifferentiated group owning every joint, no global group.
    static PartLayout single_group(const Skeleton& s, int heads, int codebook_size, int d_code);

    nlohmann::json to_json() const;
    static PartLayout from_json(const nlohmann::json& j, const Skeleton& s);
    friend bool operator==(const PartLayout&, const PartLayout&) = default;
};

struct HiddenSpec {
    std::vector<int> widths{64, 64};
    Activation activation = Activation::leaky_relu;
    friend bool operator==(const HiddenSpec&, const HiddenSpec&) = default;
};

struct QPoserModel {
    PartLayout layout;
    Skeleton skeleton;
    HiddenSpec hidden;
    std::vector<std::vector<MlpParams>> part_encoders;  // [part][head]
    std::vector<MlpParams> global_encoders;             // [head]
    std::vector<Codebook> codebooks;                    // indexed like layout.codebooks
    std::vector<MlpParams> part_decoders;               // [part]
    bool codebooks_seeded = false;  // set once codes are drawn from encoder outputs
    std::uint64_t fingerprint = 0;

    int slot_count() const { return layout.slot_count(); }
    int codebook_of_slot(int slot) const;
    int part_of_slot(int slot) const;  // -1 for global slots
    const MlpParams& encoder_of_slot(int slot) const;

    /// All perceptrons in canonical order: part encoders, global encoders, decoders.
    std::vector<MlpParams*> mlps();
    std::vector<const MlpParams*> mlps() const;
    std::size_t parameter_count() const;

    /// Recomputes the 64-bit hash over layout, skeleton, parameters and codes.
    void refresh_fingerprint();
    std::uint64_t compute_fingerprint() const;
};

/// Deterministic initialization from `seed`.
QPoserModel build_model(const PartLayout& layout, const Skeleton& skeleton, const HiddenSpec& hidden, std::uint64_t seed);

/// Pre-quantization encoder outputs, one row per slot (slot_count x d_code).
struct ContinuousLatent {
    Tensor slots;
    friend bool operator==(const ContinuousLatent& a, const ContinuousLatent& b) {
        return a.slots.rows() == b.slots.rows() && a.slots.cols() == b.slots.cols() && a.slots == b.slots;
    }
};

struct LatentCode {
    std::uint64_t fingerprint = 0;
    std::vector<int> indices;  // one per slot
    friend bool operator==(const LatentCode&, const LatentCode&) = default;
};

struct Encoding {
    ContinuousLatent continuous;
    LatentCode code;
};

Encoding encode(const QPoserModel& m, const Pose& p);
LatentCode encode_code(const QPoserModel& m, const Pose& p);
Pose decode_quantized(const QPoserModel& m, const LatentCode& c);
Pose decode_continuous(const QPoserModel& m, const ContinuousLatent& z);

/// decode_quantized(encode(p)).
Pose reconstruct(const QPoserModel& m, const Pose& p);

/// Latent linear interpolation on pre-quantization encodings; frame k uses
/// t = k/(steps-1). Frame 0 and the last frame are decode_continuous of the
/// endpoint encodings.
std::vector<Pose> interpolate(const QPoserModel& m, const Pose& a, const Pose& b, int steps);

struct Sample {
    LatentCode code;
    Pose pose;
};

/// Uniform code per slot from its codebook, decoded.
Sample sample(const QPoserModel& m, Rng& rng);

/// `base` with the named part's slot group taken from `source`.
LatentCode modify_part(const QPoserModel& m, const LatentCode& base, const std::string& part_name, const LatentCode& source);

/// mpjae(p, p_i) for p_i = decode(encode(p_{i-1})), i = 1..k.
std::vector<double> iterate_roundtrip(const QPoserModel& m, const Pose& p, int k);

// ---------------------------------------------------------------------------
// Batch paths used by training and evaluation.

/// Poses to an n x 4N matrix of quaternion components.
Tensor poses_to_matrix(std::span<const Pose> poses);

/// Encoder outputs for a batch, one n x d tensor per slot.
std::vector<Tensor> encode_batch(const QPoserModel& m, const Tensor& x);

/// Nearest-code indices per slot.
std::vector<std::vector<int>> quantize_batch(const QPoserModel& m, const std::vector<Tensor>& z);

/// Codebook rows for the given indices, one n x d tensor per slot.
std::vector<Tensor> lookup_codes(const QPoserModel& m, const std::vector<std::vector<int>>& indices);

/// Raw (uncanonicalized) decoder outputs assembled into an n x 4N matrix.
Tensor decode_batch_raw(const QPoserModel& m, const std::vector<Tensor>& slot_inputs);

/// Canonicalizes each row of a raw decoder output matrix into a Pose.
std::vector<Pose> matrix_to_poses(const QPoserModel& m, const Tensor& raw);

/// decode_quantized(encode(p)) for a whole set.
std::vector<Pose> reconstruct_batch(const QPoserModel& m, std::span<const Pose> poses);

struct ModelGrads {
    std::vector<MlpGrads> mlps;  // same order as QPoserModel::mlps()
    static ModelGrads zeros_like(const QPoserModel& m);
    std::vector<std::span<const double>> blocks() const;
    std::vector<double> flatten() const;
};

struct LossResult {
    double total = 0.0;
    double recon = 0.0;
    double commit = 0.0;
    ModelGrads grads;
    std::vector<Tensor> z;                      // encoder outputs per slot
    std::vector<std::vector<int>> indices;      // selected codes per slot
    std::uint64_t signature = 0;                // activation signs + codes
};

/// Frozen quantization for checking the straight-through estimator: the
/// decoders read z + (z_q - z) with the difference taken at the anchor
/// point, and the commitment term targets the anchor's codes.
struct QuantizationAnchor {
    std::vector<Tensor> offset;  // z_q - z per slot
    std::vector<Tensor> codes;   // z_q per slot
};

QuantizationAnchor anchor_of(const QPoserModel& m, const LossResult& at);

/// L = mean((raw - target)^2) + lambda * mean_entries |z - z_q|^2, with
/// straight-through gradients into the encoders. Codebooks are untouched.
/// With an anchor the loss is the straight-through surrogate, whose exact
/// gradient is what this function returns.
/// Throws numeric on a non-finite loss.
LossResult loss_and_grads(const QPoserModel& m, const Tensor& batch, double lambda, bool want_grads = true,
                          const QuantizationAnchor* anchor = nullptr);
LossResult loss_and_grads(const QPoserModel& m, std::span<const Pose> batch, double lambda);

/// Parameter views in the order of ModelGrads::blocks().
std::vector<std::span<double>> parameter_blocks(QPoserModel& m);

// ---------------------------------------------------------------------------
// Latent JSON: {"fingerprint": hex, "parts": {name: [indices]}, "global": [indices]}

std::string fingerprint_hex(std::uint64_t fp);
std::uint64_t parse_fingerprint_hex(const std::string& s);
nlohmann::json latent_to_json(const QPoserModel& m, const LatentCode& c);
/// Throws invalid_argument on shape errors, mismatch on a foreign fingerprint.
LatentCode latent_from_json(const QPoserModel& m, const nlohmann::json& j);

/// Throws mismatch / invalid_argument when `c` cannot be decoded by `m`.
void check_latent(const QPoserModel& m, const LatentCode& c);

}  // namespace qposer
