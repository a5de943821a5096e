// SPDX-License-Identifier: Apache-2.0
#include "qposer/training.hpp"

#include <bit>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>

#include <spdlog/spdlog.h>
#include <zlib.h>

#include "qposer/error.hpp"

namespace qposer {

// ---------------------------------------------------------------------------
// Config

std::string to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

LrSchedule lr_schedule_from_string(const std::string& s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "cosine") return LrSchedule::cosine;
    fail(ErrorKind::invalid_argument, "unknown learning-rate schedule '" + s + "' (expected constant or cosine)");
}

double TrainConfig::learning_rate_at(std::uint64_t step) const {
    if (lr_schedule == LrSchedule::constant || steps == 0) return learning_rate;
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(steps));
    return learning_rate * (lr_floor + (1.0 - lr_floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

void TrainConfig::validate() const {
    if (batch_size < 1) fail(ErrorKind::invalid_argument, "train config: batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail(ErrorKind::invalid_argument, "train config: learning_rate must be finite and >= 0");
    if (!(commitment_weight >= 0.0)) fail(ErrorKind::invalid_argument, "train config: commitment weight must be >= 0");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) fail(ErrorKind::invalid_argument, "train config: ema_decay must lie in (0, 1)");
    if (!(ema_epsilon >= 0.0)) fail(ErrorKind::invalid_argument, "train config: ema_epsilon must be >= 0");
    if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) fail(ErrorKind::invalid_argument, "train config: lr_floor must lie in [0, 1]");
    if (eval_every < 1) fail(ErrorKind::invalid_argument, "train config: eval_every must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::invalid_argument, "train config: momentum must lie in [0, 1)");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"batch_size", batch_size},
            {"steps", steps},
            {"learning_rate", learning_rate},
            {"lr_schedule", to_string(lr_schedule)},
            {"lr_floor", lr_floor},
            {"optimizer", to_string(optimizer)},
            {"momentum", momentum},
            {"commitment_weight", commitment_weight},
            {"ema_decay", ema_decay},
            {"ema_epsilon", ema_epsilon},
            {"reseed_min_usage", reseed_min_usage},
            {"eval_every", eval_every},
            {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        c.batch_size = j.value("batch_size", c.batch_size);
        c.steps = j.value("steps", c.steps);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        if (j.contains("lr_schedule")) c.lr_schedule = lr_schedule_from_string(j.at("lr_schedule").get<std::string>());
        c.lr_floor = j.value("lr_floor", c.lr_floor);
        if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
        c.momentum = j.value("momentum", c.momentum);
        c.commitment_weight = j.value("commitment_weight", c.commitment_weight);
        c.ema_decay = j.value("ema_decay", c.ema_decay);
        c.ema_epsilon = j.value("ema_epsilon", c.ema_epsilon);
        c.reseed_min_usage = j.value("reseed_min_usage", c.reseed_min_usage);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainState TrainState::start(QPoserModel model, const TrainConfig& cfg) {
    cfg.validate();
    TrainState s;
    s.model = std::move(model);
    s.config = cfg;
    s.optimizer = cfg.optimizer == OptimizerKind::adaptive_moments ? OptimizerState::adam(cfg.learning_rate)
                                                                    : OptimizerState::sgd(cfg.learning_rate, cfg.momentum);
    s.batch_rng = Rng::derive(cfg.seed, "batch").state();
    s.reseed_rng = Rng::derive(cfg.seed, "reseed").state();
    return s;
}

// ---------------------------------------------------------------------------
// Loop

ValidationResult validate_model(const QPoserModel& m, std::span<const Pose> poses) {
    ValidationResult r;
    r.usage.assign(m.codebooks.size(), 0.0);
    if (poses.empty()) return r;
    const auto z = encode_batch(m, poses_to_matrix(poses));
    const auto idx = quantize_batch(m, z);
    const auto recon = matrix_to_poses(m, decode_batch_raw(m, lookup_codes(m, idx)));
    double sum = 0.0;
    for (std::size_t i = 0; i < poses.size(); ++i) sum += mpjae_deg(poses[i], recon[i]);
    r.mpjae = sum / static_cast<double>(poses.size());
    std::vector<std::vector<char>> used;
    for (const auto& cb : m.codebooks) used.emplace_back(static_cast<std::size_t>(cb.size()), 0);
    for (std::size_t s = 0; s < idx.size(); ++s) {
        const auto b = static_cast<std::size_t>(m.codebook_of_slot(static_cast<int>(s)));
        for (int i : idx[s]) used[b][static_cast<std::size_t>(i)] = 1;
    }
    for (std::size_t b = 0; b < used.size(); ++b) {
        double n = 0.0;
        for (char u : used[b]) n += u;
        r.usage[b] = n / static_cast<double>(used[b].size());
    }
    return r;
}

namespace {

// Rows of every slot bound to codebook `b`, stacked.
Tensor stack_codebook_rows(const QPoserModel& m, const std::vector<Tensor>& z, int b) {
    Eigen::Index rows = 0;
    for (int s = 0; s < m.slot_count(); ++s) {
        if (m.codebook_of_slot(s) == b) rows += z[static_cast<std::size_t>(s)].rows();
    }
    Tensor out(rows, m.layout.d_code);
    Eigen::Index r = 0;
    for (int s = 0; s < m.slot_count(); ++s) {
        if (m.codebook_of_slot(s) != b) continue;
        const Tensor& t = z[static_cast<std::size_t>(s)];
        out.middleRows(r, t.rows()) = t;
        r += t.rows();
    }
    return out;
}

}  // namespace

void run_training(TrainState& state, const PoseDataset& train_set, const PoseDataset& val_set, std::optional<std::uint64_t> until,
                  const StepCallback& on_eval) {
    TrainConfig& cfg = state.config;
    cfg.validate();
    QPoserModel& m = state.model;
    if (train_set.poses.empty() || val_set.poses.empty()) fail(ErrorKind::invalid_argument, "training needs nonempty train and validation sets");
    if (train_set.skeleton_id != m.skeleton.name || val_set.skeleton_id != m.skeleton.name)
        fail(ErrorKind::mismatch, "dataset skeleton differs from the model skeleton");

    const std::uint64_t target = until ? std::min(*until, cfg.steps) : cfg.steps;
    if (state.step >= target) return;

    const std::uint64_t epoch_steps = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
    Rng batch_rng(state.batch_rng);
    Rng reseed_rng(state.reseed_rng);
    const auto n_books = static_cast<int>(m.codebooks.size());
    std::vector<Pose> batch(cfg.batch_size);

    while (state.step < target) {
        for (auto& p : batch) p = train_set.poses[batch_rng.uniform_index(train_set.size())];
        const Tensor x = poses_to_matrix(batch);

        if (!m.codebooks_seeded) {
            const auto z0 = encode_batch(m, x);
            for (int b = 0; b < n_books; ++b) {
                const Tensor rows = stack_codebook_rows(m, z0, b);
                if (rows.rows() > 0) m.codebooks[static_cast<std::size_t>(b)].seed_from(rows, reseed_rng);
            }
            m.codebooks_seeded = true;
        }

        LossResult r;
        try {
            r = loss_and_grads(m, x, cfg.commitment_weight, true);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::numeric) fail(ErrorKind::numeric, "step " + std::to_string(state.step) + ": " + e.what());
            throw;
        }

        state.optimizer.learning_rate = cfg.learning_rate_at(state.step);
        auto params = parameter_blocks(m);
        const auto grads = r.grads.blocks();
        try {
            optimizer_step(state.optimizer, params, grads);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::numeric) fail(ErrorKind::numeric, "step " + std::to_string(state.step) + ": " + e.what());
            throw;
        }

        for (int b = 0; b < n_books; ++b) {
            std::vector<Assignment> assign;
            for (int s = 0; s < m.slot_count(); ++s) {
                if (m.codebook_of_slot(s) != b) continue;
                const Tensor& z = r.z[static_cast<std::size_t>(s)];
                for (Eigen::Index row = 0; row < z.rows(); ++row)
                    assign.push_back({r.indices[static_cast<std::size_t>(s)][static_cast<std::size_t>(row)],
                                      std::span<const double>(z.data() + row * z.cols(), static_cast<std::size_t>(z.cols()))});
            }
            if (!assign.empty()) ema_update(m.codebooks[static_cast<std::size_t>(b)], assign, cfg.ema_decay, cfg.ema_epsilon);
        }

        ++state.step;
        HistoryEntry entry{state.step, r.total, r.recon, r.commit, std::nullopt, {}};

        if (state.step % epoch_steps == 0) {
            for (int b = 0; b < n_books; ++b) {
                auto& cb = m.codebooks[static_cast<std::size_t>(b)];
                const Tensor rows = stack_codebook_rows(m, r.z, b);
                if (rows.rows() > 0) {
                    const int n = reseed_dead_codes(cb, rows, cfg.reseed_min_usage, reseed_rng);
                    if (n > 0) spdlog::debug("step {}: reseeded {} dead codes in codebook {}", state.step, n, cb.id);
                }
                cb.reset_usage();
            }
        }

        if (state.step % cfg.eval_every == 0 || state.step == cfg.steps) {
            const ValidationResult v = validate_model(m, val_set.poses);
            entry.val_mpjae = v.mpjae;
            entry.usage = v.usage;
            spdlog::info("step {:>6}  loss {:.6f}  recon {:.6f}  commit {:.6f}  val_mpjae {:.3f} deg", state.step, r.total, r.recon,
                         r.commit, v.mpjae);
        }
        state.history.push_back(std::move(entry));
        if (state.history.back().val_mpjae && on_eval) {
            state.batch_rng = batch_rng.state();
            state.reseed_rng = reseed_rng.state();
            on_eval(state, state.history.back());
        }
    }
    state.batch_rng = batch_rng.state();
    state.reseed_rng = reseed_rng.state();
    m.refresh_fingerprint();
}

TrainResult train(QPoserModel model, const PoseDataset& train_set, const PoseDataset& val_set, const TrainConfig& cfg) {
    TrainState state = TrainState::start(std::move(model), cfg);
    run_training(state, train_set, val_set);
    state.model.refresh_fingerprint();
    return {std::move(state.model), std::move(state.history)};
}

std::string history_csv(const std::vector<HistoryEntry>& history, const PartLayout& layout) {
    std::string out = "step,loss_total,loss_recon,loss_commit,val_mpjae";
    for (const auto& cb : layout.codebooks) out += ",usage_" + cb.id;
    out += '\n';
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.10g", v);
        return std::string(buf);
    };
    for (const auto& h : history) {
        out += std::to_string(h.step) + ',' + num(h.loss_total) + ',' + num(h.loss_recon) + ',' + num(h.loss_commit) + ',';
        if (h.val_mpjae) out += num(*h.val_mpjae);
        for (std::size_t b = 0; b < layout.codebooks.size(); ++b) {
            out += ',';
            if (b < h.usage.size()) out += num(h.usage[b]);
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint container

namespace {

class Writer {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f64s(const double* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f64(p[i]);
    }
    void raw(std::string_view s) { buf_.append(s); }
    std::string& str() { return buf_; }

private:
    std::string buf_;
};

class Reader {
public:
    Reader(std::string_view data, std::string what) : data_(data), what_(std::move(what)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(data_[pos_ + static_cast<std::size_t>(i)]);
        pos_ += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    void f64s(double* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) p[i] = f64();
    }
    std::string_view bytes(std::size_t n) {
        need(n);
        auto s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) fail(ErrorKind::format, "checkpoint " + what_ + ": truncated");
    }
    std::string_view data_;
    std::size_t pos_ = 0;
    std::string what_;
};

std::uint32_t crc(std::string_view s) {
    return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size())));
}

nlohmann::json history_to_json(const std::vector<HistoryEntry>& history) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& h : history) {
        nlohmann::json e = {{"step", h.step}, {"total", h.loss_total}, {"recon", h.loss_recon}, {"commit", h.loss_commit}};
        if (h.val_mpjae) e["val_mpjae"] = *h.val_mpjae;
        if (!h.usage.empty()) e["usage"] = h.usage;
        a.push_back(std::move(e));
    }
    return a;
}

std::vector<HistoryEntry> history_from_json(const nlohmann::json& a) {
    std::vector<HistoryEntry> out;
    for (const auto& e : a) {
        HistoryEntry h;
        h.step = e.at("step").get<std::uint64_t>();
        h.loss_total = e.at("total").get<double>();
        h.loss_recon = e.at("recon").get<double>();
        h.loss_commit = e.at("commit").get<double>();
        if (e.contains("val_mpjae")) h.val_mpjae = e.at("val_mpjae").get<double>();
        if (e.contains("usage")) h.usage = e.at("usage").get<std::vector<double>>();
        out.push_back(std::move(h));
    }
    return out;
}

}  // namespace

std::string checkpoint_bytes(const TrainState& state) {
    const QPoserModel& m = state.model;
    const OptimizerState& o = state.optimizer;
    std::vector<std::pair<std::string, std::string>> sections;

    nlohmann::json meta = {
        {"skeleton", m.skeleton.to_json()},
        {"layout", m.layout.to_json()},
        {"hidden", {{"widths", m.hidden.widths}, {"activation", to_string(m.hidden.activation)}}},
        {"codebooks_seeded", m.codebooks_seeded},
        {"train_config", state.config.to_json()},
        {"step", state.step},
        {"batch_rng", state.batch_rng},
        {"reseed_rng", state.reseed_rng},
        {"data", state.data_info},
        {"optimizer",
         {{"kind", to_string(o.kind)},
          {"learning_rate", o.learning_rate},
          {"momentum", o.momentum},
          {"beta1", o.beta1},
          {"beta2", o.beta2},
          {"epsilon", o.epsilon},
          {"step_count", o.step_count},
          {"has_first", !o.first_moment.empty()},
          {"has_second", !o.second_moment.empty()}}},
    };
    sections.emplace_back("META", meta.dump());

    Writer parm;
    for (const auto* p : m.mlps()) {
        for (const auto& b : p->blocks()) parm.f64s(b.data(), b.size());
    }
    sections.emplace_back("PARM", std::move(parm.str()));

    Writer code;
    for (const auto& cb : m.codebooks) {
        code.f64s(cb.codes.data(), static_cast<std::size_t>(cb.codes.size()));
        code.f64s(cb.ema_cluster_size.data(), static_cast<std::size_t>(cb.ema_cluster_size.size()));
        code.f64s(cb.ema_code_sum.data(), static_cast<std::size_t>(cb.ema_code_sum.size()));
        for (auto u : cb.usage_count) code.u64(u);
    }
    sections.emplace_back("CODE", std::move(code.str()));

    Writer optm;
    for (const auto& v : o.first_moment) optm.f64s(v.data(), v.size());
    for (const auto& v : o.second_moment) optm.f64s(v.data(), v.size());
    sections.emplace_back("OPTM", std::move(optm.str()));

    sections.emplace_back("HIST", history_to_json(state.history).dump());

    Writer out;
    out.raw("QPCK");
    out.u32(kCheckpointVersion);
    out.u32(static_cast<std::uint32_t>(sections.size()));
    for (const auto& [tag, payload] : sections) {
        out.raw(tag);
        out.u64(payload.size());
        out.raw(payload);
        out.u32(crc(payload));
    }
    return std::move(out.str());
}

TrainState checkpoint_from_bytes(const std::string& bytes) {
    Reader in(bytes, "container");
    if (in.bytes(4) != "QPCK") fail(ErrorKind::format, "checkpoint: bad magic");
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion)
        fail(ErrorKind::format, "checkpoint: version mismatch (file " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t count = in.u32();
    std::map<std::string, std::string_view> sections;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string tag(in.bytes(4));
        const std::uint64_t len = in.u64();
        if (len > bytes.size()) fail(ErrorKind::format, "checkpoint: section " + tag + " checksum failure (length exceeds file)");
        const std::string_view payload = in.bytes(static_cast<std::size_t>(len));
        if (in.u32() != crc(payload)) fail(ErrorKind::format, "checkpoint: section " + tag + " checksum failure");
        sections[tag] = payload;
    }
    if (!in.done()) fail(ErrorKind::format, "checkpoint: trailing bytes");
    for (const char* tag : {"META", "PARM", "CODE", "OPTM", "HIST"}) {
        if (!sections.count(tag)) fail(ErrorKind::format, std::string("checkpoint: missing section ") + tag);
    }

    TrainState s;
    try {
        const auto meta = nlohmann::json::parse(sections["META"]);
        const Skeleton skel = Skeleton::from_json(meta.at("skeleton"));
        const PartLayout layout = PartLayout::from_json(meta.at("layout"), skel);
        HiddenSpec hidden;
        hidden.widths = meta.at("hidden").at("widths").get<std::vector<int>>();
        hidden.activation = activation_from_string(meta.at("hidden").at("activation").get<std::string>());
        s.model = build_model(layout, skel, hidden, 0);
        s.model.codebooks_seeded = meta.at("codebooks_seeded").get<bool>();
        s.config = TrainConfig::from_json(meta.at("train_config"));
        s.step = meta.at("step").get<std::uint64_t>();
        s.batch_rng = meta.at("batch_rng").get<std::uint64_t>();
        s.reseed_rng = meta.at("reseed_rng").get<std::uint64_t>();
        if (meta.contains("data")) s.data_info = meta.at("data");
        const auto& o = meta.at("optimizer");
        s.optimizer.kind = optimizer_from_string(o.at("kind").get<std::string>());
        s.optimizer.learning_rate = o.at("learning_rate").get<double>();
        s.optimizer.momentum = o.at("momentum").get<double>();
        s.optimizer.beta1 = o.at("beta1").get<double>();
        s.optimizer.beta2 = o.at("beta2").get<double>();
        s.optimizer.epsilon = o.at("epsilon").get<double>();
        s.optimizer.step_count = o.at("step_count").get<std::uint64_t>();

        Reader parm(sections["PARM"], "PARM");
        for (auto* p : s.model.mlps()) {
            for (auto& b : p->blocks()) parm.f64s(b.data(), b.size());
        }
        if (!parm.done()) fail(ErrorKind::format, "checkpoint: PARM size does not match the layout");

        Reader code(sections["CODE"], "CODE");
        for (auto& cb : s.model.codebooks) {
            code.f64s(cb.codes.data(), static_cast<std::size_t>(cb.codes.size()));
            code.f64s(cb.ema_cluster_size.data(), static_cast<std::size_t>(cb.ema_cluster_size.size()));
            code.f64s(cb.ema_code_sum.data(), static_cast<std::size_t>(cb.ema_code_sum.size()));
            for (auto& u : cb.usage_count) u = code.u64();
        }
        if (!code.done()) fail(ErrorKind::format, "checkpoint: CODE size does not match the layout");

        Reader optm(sections["OPTM"], "OPTM");
        auto read_moments = [&](std::vector<std::vector<double>>& dst) {
            for (const auto& b : parameter_blocks(s.model)) {
                dst.emplace_back(b.size());
                optm.f64s(dst.back().data(), b.size());
            }
        };
        if (o.at("has_first").get<bool>()) read_moments(s.optimizer.first_moment);
        if (o.at("has_second").get<bool>()) read_moments(s.optimizer.second_moment);
        if (!optm.done()) fail(ErrorKind::format, "checkpoint: OPTM size does not match the layout");

        s.history = history_from_json(nlohmann::json::parse(sections["HIST"]));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("checkpoint metadata: ") + e.what());
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::format) throw;
        fail(ErrorKind::format, std::string("checkpoint: ") + e.what());
    }
    s.model.refresh_fingerprint();
    return s;
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
    const std::string bytes = checkpoint_bytes(state);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::not_found, "cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::format, "write failed for " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::not_found, "cannot open checkpoint " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    return checkpoint_from_bytes(bytes);
}

void save_model(const std::filesystem::path& path, const QPoserModel& m) {
    TrainState s = TrainState::start(m, TrainConfig{});
    s.model.refresh_fingerprint();
    save_checkpoint(path, s);
}

QPoserModel load_model(const std::filesystem::path& path) { return load_checkpoint(path).model; }

}  // namespace qposer
