#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvar/checkpoint.hpp"
#include "cvar/model.hpp"
#include "cvar/rng.hpp"
#include "cvar/synth.hpp"
#include "cvar/tokenizer.hpp"

namespace cvar {

struct TrainConfig {
    int batch = 8;
    int64_t steps = 2000;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double delta = 0.1;  // condition-dropout probability
    uint64_t seed = 0;
    int64_t ckpt_every = 500;

    void validate() const {
        if (batch < 1 || steps < 1) throw std::invalid_argument("train config: batch and steps must be positive");
        if (delta < 0.0 || delta > 1.0) throw std::invalid_argument("train config: delta must be in [0,1]");
    }
};

inline ControlKind sample_control_type(Rng& rng, int n_typ = kNumControlKinds) {
    return static_cast<ControlKind>(rng.below_int(n_typ));
}

// Independently replaces cls and typ with EMPTY, each with probability delta.
inline Conditioning apply_condition_dropout(Conditioning cond, double delta, Rng& rng) {
    if (rng.uniform() < delta) cond.cls = Conditioning::kEmpty;
    if (rng.uniform() < delta) cond.typ = Conditioning::kEmpty;
    return cond;
}

// ---- tokenized dataset + on-disk token cache ----

// image tokens plus the four control streams, order matching ControlKind.
struct TokenizedSample {
    ScaleTokenMaps image;
    std::array<ScaleTokenMaps, kNumControlKinds> controls;
    int cls = 0;
};

inline TokenizedSample tokenize_sample(const SynthSample& s, const Codebook& cb, const ScaleSchedule& sched) {
    TokenizedSample out;
    out.image = encode(s.image, cb, sched);
    out.controls[0] = encode(s.mask.pixels, cb, sched);
    out.controls[1] = encode(s.edge.pixels, cb, sched);
    out.controls[2] = encode(s.depth.pixels, cb, sched);
    out.controls[3] = encode(s.normal.pixels, cb, sched);
    out.cls = s.scene.cls;
    return out;
}

namespace detail {

inline std::string dirname_of(const std::string& path) {
    const auto p = std::filesystem::path(path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

}  // namespace detail

// Token cache beside the manifest, keyed by (codebook hash, schedule).
// Format: magic "CVTK", version u32, vocab u32, T u32, T x (h,w) i32 pairs,
// 64-byte codebook hash hex, count u64, then per sample the class as i32 and
// 5 streams (image, mask, edge, depth, normal) of u16 tokens.
inline std::vector<TokenizedSample> load_or_build_token_cache(const std::string& manifest_path, const Codebook& cb,
                                                              const ScaleSchedule& sched) {
    const auto records = load_manifest(manifest_path);
    const std::string cache_path = detail::dirname_of(manifest_path) + "/tokens.cvtk";
    const std::string cb_hash = cb.hash();
    const int positions = sched.positions();

    auto try_load = [&]() -> std::vector<TokenizedSample> {
        std::ifstream f(cache_path, std::ios::binary);
        if (!f) return {};
        char magic[4];
        f.read(magic, 4);
        if (f.gcount() != 4 || std::memcmp(magic, "CVTK", 4) != 0) return {};
        uint32_t version = 0, vocab = 0, t = 0;
        f.read(reinterpret_cast<char*>(&version), 4);
        f.read(reinterpret_cast<char*>(&vocab), 4);
        f.read(reinterpret_cast<char*>(&t), 4);
        if (version != 1 || vocab != static_cast<uint32_t>(cb.vocab) ||
            t != static_cast<uint32_t>(sched.count())) {
            return {};
        }
        for (int i = 0; i < sched.count(); ++i) {
            int32_t h = 0, w = 0;
            f.read(reinterpret_cast<char*>(&h), 4);
            f.read(reinterpret_cast<char*>(&w), 4);
            if (h != sched.h(i) || w != sched.w(i)) return {};
        }
        char hash[64];
        f.read(hash, 64);
        if (f.gcount() != 64 || std::string(hash, 64) != cb_hash) return {};
        uint64_t count = 0;
        f.read(reinterpret_cast<char*>(&count), 8);
        if (count != records.size()) return {};
        std::vector<TokenizedSample> out(records.size());
        std::vector<uint16_t> buf(static_cast<size_t>(positions));
        for (auto& ts : out) {
            int32_t cls = 0;
            f.read(reinterpret_cast<char*>(&cls), 4);
            ts.cls = cls;
            auto read_stream = [&](ScaleTokenMaps& maps) {
                f.read(reinterpret_cast<char*>(buf.data()),
                       static_cast<std::streamsize>(buf.size() * sizeof(uint16_t)));
                maps.tokens.assign(buf.begin(), buf.end());
            };
            read_stream(ts.image);
            for (auto& c : ts.controls) read_stream(c);
        }
        if (!f) return {};
        return out;
    };

    auto cached = try_load();
    if (!cached.empty()) return cached;

    // (re)build: tokenize every sample from its PPM files
    const std::string dir = detail::dirname_of(manifest_path);
    std::vector<TokenizedSample> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        TokenizedSample ts;
        ts.cls = r.cls;
        ts.image = encode(read_ppm(dir + "/" + r.image), cb, sched);
        ts.controls[0] = encode(read_ppm(dir + "/" + r.mask), cb, sched);
        ts.controls[1] = encode(read_ppm(dir + "/" + r.edge), cb, sched);
        ts.controls[2] = encode(read_ppm(dir + "/" + r.depth), cb, sched);
        ts.controls[3] = encode(read_ppm(dir + "/" + r.normal), cb, sched);
        out.push_back(std::move(ts));
    }

    std::ofstream f(cache_path, std::ios::binary);
    if (f) {
        f.write("CVTK", 4);
        const uint32_t version = 1, vocab = static_cast<uint32_t>(cb.vocab),
                       t32 = static_cast<uint32_t>(sched.count());
        f.write(reinterpret_cast<const char*>(&version), 4);
        f.write(reinterpret_cast<const char*>(&vocab), 4);
        f.write(reinterpret_cast<const char*>(&t32), 4);
        for (int i = 0; i < sched.count(); ++i) {
            const int32_t h = sched.h(i), w = sched.w(i);
            f.write(reinterpret_cast<const char*>(&h), 4);
            f.write(reinterpret_cast<const char*>(&w), 4);
        }
        f.write(cb_hash.data(), 64);
        const uint64_t count = out.size();
        f.write(reinterpret_cast<const char*>(&count), 8);
        std::vector<uint16_t> buf(static_cast<size_t>(positions));
        for (const auto& ts : out) {
            const int32_t cls = ts.cls;
            f.write(reinterpret_cast<const char*>(&cls), 4);
            auto write_stream = [&](const ScaleTokenMaps& maps) {
                for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<uint16_t>(maps.tokens[i]);
                f.write(reinterpret_cast<const char*>(buf.data()),
                        static_cast<std::streamsize>(buf.size() * sizeof(uint16_t)));
            };
            write_stream(ts.image);
            for (const auto& c : ts.controls) write_stream(c);
        }
    }
    return out;
}

// ---- optimizer ----

// AdamW step over the flat gradient buffers (bias-corrected moments,
// decoupled weight decay).
inline void adam_step(ModelParams<float>& p, AdamState& st, const std::vector<std::vector<float>>& grads,
                      const TrainConfig& cfg) {
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    size_t idx = 0;
    visit_params(p, [&](const char*, Tensor<float>& t) {
        auto& m = st.m[idx];
        auto& v = st.v[idx];
        const auto& g = grads[idx];
        for (size_t i = 0; i < t.data.size(); ++i) {
            m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
            v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * static_cast<double>(g[i]) * g[i]);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t.data[i] -= static_cast<float>(cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                                      cfg.weight_decay * t.data[i]));
        }
        ++idx;
    });
}

// ---- one optimization step ----

struct StepStats {
    double loss_total = 0, loss_image = 0, loss_control = 0;
};

// Runs train steps over a tokenized dataset. Batches come from an epoch-level
// seeded permutation sliced by the running step index, so resuming at step k
// replays exactly the stream an uninterrupted run would have seen.
class Trainer {
public:
    Trainer(ModelParams<float>& params, AdamState& opt, const std::vector<TokenizedSample>& data,
            const Codebook& cb, const TrainConfig& cfg)
        : p_(params),
          opt_(opt),
          data_(data),
          cb_(cb),
          cfg_(cfg),
          layout_(SequenceLayout::build(params.cfg.scale_schedule())),
          base_rng_(mix64(cfg.seed ^ 0x7261494Eull)) {
        cfg.validate();
        if (data.empty()) throw std::invalid_argument("trainer: empty dataset");
        grads_.clear();
        visit_params(p_, [this](const char*, const Tensor<float>& t) { grads_.emplace_back(t.numel(), 0.0f); });
    }

    // One AdamW update over a deterministic batch; returns mean losses.
    StepStats step(int64_t step_index) {
        for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0f);
        Rng srng = base_rng_.derive(0x57E9000000ull + static_cast<uint64_t>(step_index));
        StepStats stats;
        const float inv_batch = 1.0f / static_cast<float>(cfg_.batch);
        for (int b = 0; b < cfg_.batch; ++b) {
            const size_t idx = pick_index(step_index, b);
            const TokenizedSample& ts = data_[idx];
            const ControlKind kind = sample_control_type(srng, p_.cfg.n_typ);
            Conditioning cond{ts.cls, static_cast<int>(kind)};
            cond = apply_condition_dropout(cond, cfg_.delta, srng);

            Graph<float> g(true);
            const ParamVars<float> pv = register_params(g, p_);
            const auto logits = model_forward(g, pv, p_, layout_, cb_, ts.controls[static_cast<size_t>(kind)],
                                              ts.image, cond);
            const auto loss = model_loss(g, logits, ts.controls[static_cast<size_t>(kind)], ts.image);
            const double lt = g.value(loss.total).data[0];
            const double lc = g.value(loss.ctrl).data[0];
            const double li = g.value(loss.img).data[0];
            if (!std::isfinite(lt)) throw std::runtime_error("trainer: non-finite loss at step " +
                                                             std::to_string(step_index));
            stats.loss_total += lt * inv_batch;
            stats.loss_control += lc * inv_batch;
            stats.loss_image += li * inv_batch;
            g.backward(loss.total);
            size_t gi = 0;
            visit_param_vars(pv, [&](typename Graph<float>::Var var) {
                const Tensor<float>& grad = g.grad(var);
                float* dst = grads_[gi].data();
                for (size_t i = 0; i < grad.data.size(); ++i) dst[i] += inv_batch * grad.data[i];
                ++gi;
            });
        }
        adam_step(p_, opt_, grads_, cfg_);
        return stats;
    }

private:
    size_t pick_index(int64_t step_index, int slot) {
        const int64_t flat = step_index * cfg_.batch + slot;
        const int64_t epoch = flat / static_cast<int64_t>(data_.size());
        if (epoch != perm_epoch_) {
            perm_.resize(data_.size());
            for (size_t j = 0; j < perm_.size(); ++j) perm_[j] = j;
            Rng erng = base_rng_.derive(0x0E90C400000ull + static_cast<uint64_t>(epoch));
            for (size_t j = perm_.size(); j > 1; --j) std::swap(perm_[j - 1], perm_[erng.below(j)]);
            perm_epoch_ = epoch;
        }
        return perm_[static_cast<size_t>(flat % static_cast<int64_t>(data_.size()))];
    }

    ModelParams<float>& p_;
    AdamState& opt_;
    const std::vector<TokenizedSample>& data_;
    const Codebook& cb_;
    TrainConfig cfg_;
    SequenceLayout layout_;
    Rng base_rng_;
    std::vector<std::vector<float>> grads_;
    std::vector<size_t> perm_;
    int64_t perm_epoch_ = -1;
};

struct TrainLogEntry {
    int64_t step = 0;
    double loss_image = 0, loss_control = 0, lr = 0;
    int64_t wall_ms = 0;
};

inline std::string train_log_line(const TrainLogEntry& e) {
    nlohmann::json j;
    j["step"] = e.step;
    j["loss_image"] = e.loss_image;
    j["loss_control"] = e.loss_control;
    j["lr"] = e.lr;
    j["wall_ms"] = e.wall_ms;
    return j.dump();
}

struct RunResult {
    std::string final_checkpoint;
    double final_loss_total = 0;
    int64_t steps_done = 0;
};

// Full loop: tokenized data in, periodic checkpoints (with optimizer state)
// out. `resume_from` restores parameters, Adam moments and the step counter;
// the per-step rng streams are pure functions of (seed, step), so the
// continued run is bit-identical to an uninterrupted one.
inline RunResult run_training(ModelParams<float>& params, const std::vector<TokenizedSample>& data,
                              const Codebook& cb, const TrainConfig& cfg, const std::string& out_dir,
                              const std::string& config_hash, std::ostream* log = nullptr,
                              const std::string& resume_from = "") {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    AdamState opt = AdamState::zeros_like(params);
    int64_t start_step = 0;
    if (!resume_from.empty()) {
        CheckpointMeta meta;
        params = read_checkpoint(resume_from, &meta, &opt);
        start_step = meta.step;
    }
    Trainer trainer(params, opt, data, cb, cfg);
    CheckpointMeta meta;
    meta.codebook_hash = cb.hash();
    meta.config_hash = config_hash;
    meta.train_seed = cfg.seed;

    RunResult res;
    const auto t0 = std::chrono::steady_clock::now();
    for (int64_t s = start_step; s < cfg.steps; ++s) {
        const StepStats st = trainer.step(s);
        res.final_loss_total = st.loss_total;
        if (log) {
            TrainLogEntry e;
            e.step = s;
            e.loss_image = st.loss_image;
            e.loss_control = st.loss_control;
            e.lr = cfg.lr;
            e.wall_ms =
                std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0).count();
            (*log) << train_log_line(e) << "\n";
        }
        const bool last = s + 1 == cfg.steps;
        if (last || (cfg.ckpt_every > 0 && (s + 1) % cfg.ckpt_every == 0)) {
            meta.step = s + 1;
            const std::string path = out_dir + "/ckpt_" + std::to_string(s + 1) + ".cvar";
            write_checkpoint(path, params, meta, &opt);
            write_checkpoint(out_dir + "/ckpt_latest.cvar", params, meta, &opt);
            if (last) res.final_checkpoint = path;
        }
    }
    res.steps_done = cfg.steps - start_step;
    return res;
}

}  // namespace cvar
