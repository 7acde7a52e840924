#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvar/model.hpp"

namespace cvar {

inline const char* kToolVersion = "0.1.0";

// Adam moments aligned with the visit_params enumeration.
struct AdamState {
    std::vector<std::vector<float>> m, v;
    int64_t t = 0;

    static AdamState zeros_like(const ModelParams<float>& p) {
        AdamState s;
        visit_params(p, [&s](const char*, const Tensor<float>& t) {
            s.m.emplace_back(t.numel(), 0.0f);
            s.v.emplace_back(t.numel(), 0.0f);
        });
        return s;
    }
};

struct CheckpointMeta {
    std::string tool_version = kToolVersion;
    std::string codebook_hash;
    std::string config_hash;
    int64_t step = 0;
    uint64_t train_seed = 0;
    bool has_optimizer = false;
};

namespace detail {

inline nlohmann::json model_config_json(const ModelConfig& cfg) {
    return nlohmann::json{{"width", cfg.width},   {"layers", cfg.layers},           {"heads", cfg.heads},
                          {"n_cls", cfg.n_cls},   {"n_typ", cfg.n_typ},             {"vocab", cfg.vocab},
                          {"schedule", cfg.schedule}, {"share_heads", cfg.share_heads}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.width = j.at("width").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.n_cls = j.at("n_cls").get<int>();
    cfg.n_typ = j.at("n_typ").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.schedule = j.at("schedule").get<std::vector<int>>();
    cfg.share_heads = j.at("share_heads").get<bool>();
    return cfg;
}

inline void write_floats(std::ofstream& f, const float* data, size_t n) {
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
}

inline void read_floats(std::ifstream& f, float* data, size_t n) {
    f.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(n * sizeof(float))) {
        throw std::runtime_error("checkpoint: truncated tensor data");
    }
}

}  // namespace detail

// Layout: magic "CVAR", version u32, u32 JSON length, UTF-8 JSON metadata,
// then tensors as little-endian f32 in declared order (parameters, then Adam
// m and v when the optimizer state is included).
inline void write_checkpoint(const std::string& path, const ModelParams<float>& p, const CheckpointMeta& meta,
                             const AdamState* opt = nullptr) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_checkpoint: cannot open " + path);
    nlohmann::json j;
    j["tool_version"] = meta.tool_version;
    j["dims"] = detail::model_config_json(p.cfg);
    j["codebook_hash"] = meta.codebook_hash;
    j["config_hash"] = meta.config_hash;
    j["step"] = meta.step;
    j["train_seed"] = meta.train_seed;
    j["has_optimizer"] = opt != nullptr;
    if (opt) j["adam_t"] = opt->t;
    const std::string js = j.dump();

    f.write("CVAR", 4);
    const uint32_t version = 1;
    const uint32_t jlen = static_cast<uint32_t>(js.size());
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&jlen), 4);
    f.write(js.data(), static_cast<std::streamsize>(js.size()));
    visit_params(p, [&f](const char*, const Tensor<float>& t) { detail::write_floats(f, t.data.data(), t.numel()); });
    if (opt) {
        for (const auto& m : opt->m) detail::write_floats(f, m.data(), m.size());
        for (const auto& v : opt->v) detail::write_floats(f, v.data(), v.size());
    }
    if (!f) throw std::runtime_error("write_checkpoint: write failed for " + path);
}

inline ModelParams<float> read_checkpoint(const std::string& path, CheckpointMeta* meta_out = nullptr,
                                          AdamState* opt_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "CVAR", 4) != 0) {
        throw std::runtime_error("read_checkpoint: bad magic in " + path);
    }
    uint32_t version = 0, jlen = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&jlen), 4);
    if (version != 1) throw std::runtime_error("read_checkpoint: unsupported version");
    std::string js(jlen, '\0');
    f.read(js.data(), jlen);
    if (f.gcount() != static_cast<std::streamsize>(jlen)) throw std::runtime_error("read_checkpoint: truncated JSON");
    const nlohmann::json j = nlohmann::json::parse(js);

    ModelParams<float> p = shaped_params<float>(detail::model_config_from_json(j.at("dims")));
    visit_params(p, [&f](const char*, Tensor<float>& t) { detail::read_floats(f, t.data.data(), t.numel()); });

    const bool has_opt = j.at("has_optimizer").get<bool>();
    if (opt_out) {
        if (!has_opt) throw std::runtime_error("read_checkpoint: no optimizer state in " + path);
        *opt_out = AdamState::zeros_like(p);
        for (auto& m : opt_out->m) detail::read_floats(f, m.data(), m.size());
        for (auto& v : opt_out->v) detail::read_floats(f, v.data(), v.size());
        opt_out->t = j.at("adam_t").get<int64_t>();
    }
    if (meta_out) {
        meta_out->tool_version = j.at("tool_version").get<std::string>();
        meta_out->codebook_hash = j.at("codebook_hash").get<std::string>();
        meta_out->config_hash = j.at("config_hash").get<std::string>();
        meta_out->step = j.at("step").get<int64_t>();
        meta_out->train_seed = j.at("train_seed").get<uint64_t>();
        meta_out->has_optimizer = has_opt;
    }
    return p;
}

}  // namespace cvar
