#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "cvar/eval.hpp"
#include "cvar/guidance.hpp"
#include "cvar/model.hpp"
#include "cvar/sha256.hpp"
#include "cvar/synth.hpp"
#include "cvar/trainer.hpp"

namespace cvar {

// One JSON document with a section per subsystem. Every field has a default;
// unknown keys are rejected so typos cannot silently fall back.
class Config {
public:
    static nlohmann::json defaults() {
        return nlohmann::json{
            {"data",
             {{"h", 32},
              {"w", 32},
              {"n_cls", 8},
              {"entity_min", 2},
              {"entity_max", 5},
              {"size_min", 0.30},
              {"size_max", 0.75},
              {"edge_threshold", 0.25},
              {"colormap_nh", 8},
              {"colormap_nw", 8}}},
            {"tokenizer",
             {{"vocab", 256},
              {"schedule", {1, 2, 4, 8, 16, 32}},
              {"kmeans_iters", 25},
              {"kmeans_sample_cap", 131072},
              {"fit_samples", 512},
              {"fit_seed", 7}}},
            {"model", {{"width", 256}, {"layers", 8}, {"heads", 8}, {"share_heads", false}}},
            {"train",
             {{"batch", 8},
              {"steps", 2000},
              {"lr", 1e-3},
              {"weight_decay", 0.0},
              {"beta1", 0.9},
              {"beta2", 0.95},
              {"eps", 1e-8},
              {"delta", 0.1},
              {"seed", 0},
              {"ckpt_every", 500},
              {"manifest", ""},
              {"codebook", ""},
              {"out", "run"},
              {"resume", ""},
              {"model_seed", 1}}},
            {"sample",
             {{"topk", 64},
              {"topp", 0.96},
              {"gamma_cls", 2.0},
              {"gamma_typ", 2.0},
              {"gamma_pix", 2.0},
              {"anneal", "off"}}},
            {"eval", {{"gammas", {0.0, 1.0, 2.0, 4.0}}, {"n", 64}, {"tolerance_px", 1}, {"feature_seed", 190}}}};
    }

    Config() : doc_(defaults()) {}

    static Config from_json(const nlohmann::json& user) {
        Config c;
        merge_checked(c.doc_, user, "");
        return c;
    }

    static Config from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open " + path);
        nlohmann::json j;
        f >> j;
        return from_json(j);
    }

    const nlohmann::json& json() const { return doc_; }
    nlohmann::json& json() { return doc_; }

    // Canonical form: nlohmann's sorted-key dump; parse(canonical) re-dumps
    // byte-identically.
    std::string canonical() const { return doc_.dump(); }
    std::string hash() const { return Sha256::hex(canonical()); }

    SceneConfig scene_config() const {
        const auto& d = doc_.at("data");
        SceneConfig s;
        s.h = d.at("h").get<int>();
        s.w = d.at("w").get<int>();
        s.n_cls = d.at("n_cls").get<int>();
        s.entity_min = d.at("entity_min").get<int>();
        s.entity_max = d.at("entity_max").get<int>();
        s.size_min = d.at("size_min").get<double>();
        s.size_max = d.at("size_max").get<double>();
        s.edge_threshold = d.at("edge_threshold").get<double>();
        s.colormap_nh = d.at("colormap_nh").get<int>();
        s.colormap_nw = d.at("colormap_nw").get<int>();
        return s;
    }

    ModelConfig model_config() const {
        const auto& m = doc_.at("model");
        ModelConfig c;
        c.width = m.at("width").get<int>();
        c.layers = m.at("layers").get<int>();
        c.heads = m.at("heads").get<int>();
        c.share_heads = m.at("share_heads").get<bool>();
        c.n_cls = doc_.at("data").at("n_cls").get<int>();
        c.vocab = doc_.at("tokenizer").at("vocab").get<int>();
        c.schedule = doc_.at("tokenizer").at("schedule").get<std::vector<int>>();
        return c;
    }

    TrainConfig train_config() const {
        const auto& t = doc_.at("train");
        TrainConfig c;
        c.batch = t.at("batch").get<int>();
        c.steps = t.at("steps").get<int64_t>();
        c.lr = t.at("lr").get<double>();
        c.weight_decay = t.at("weight_decay").get<double>();
        c.beta1 = t.at("beta1").get<double>();
        c.beta2 = t.at("beta2").get<double>();
        c.eps = t.at("eps").get<double>();
        c.delta = t.at("delta").get<double>();
        c.seed = t.at("seed").get<uint64_t>();
        c.ckpt_every = t.at("ckpt_every").get<int64_t>();
        return c;
    }

    SamplerConfig sampler_config() const {
        const auto& s = doc_.at("sample");
        return SamplerConfig{s.at("topk").get<int>(), s.at("topp").get<double>()};
    }

    GuidanceSpec guidance_spec() const {
        const auto& s = doc_.at("sample");
        GuidanceSpec g;
        g.gamma_cls = s.at("gamma_cls").get<double>();
        g.gamma_typ = s.at("gamma_typ").get<double>();
        g.gamma_pix = s.at("gamma_pix").get<double>();
        g.anneal = anneal_mode_from_name(s.at("anneal").get<std::string>());
        return g;
    }

private:
    static void merge_checked(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
        if (!user.is_object()) throw std::invalid_argument("config: expected object at '" + path + "'");
        for (const auto& [key, value] : user.items()) {
            const std::string here = path.empty() ? key : path + "." + key;
            if (!base.contains(key)) throw std::invalid_argument("config: unknown key '" + here + "'");
            nlohmann::json& slot = base[key];
            if (slot.is_object()) {
                merge_checked(slot, value, here);
            } else {
                const bool both_numeric = slot.is_number() && value.is_number();
                if (!both_numeric && slot.type() != value.type()) {
                    throw std::invalid_argument("config: type mismatch at '" + here + "'");
                }
                slot = value;
            }
        }
    }

    nlohmann::json doc_;
};

}  // namespace cvar
