#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvar/graph.hpp"
#include "cvar/rng.hpp"
#include "cvar/sequence.hpp"
#include "cvar/synth.hpp"
#include "cvar/tokenizer.hpp"

namespace cvar {

struct ModelConfig {
    int width = 256;
    int layers = 8;
    int heads = 8;
    int n_cls = 8;
    int n_typ = kNumControlKinds;
    int vocab = 256;
    std::vector<int> schedule = {1, 2, 4, 8, 16, 32};
    bool share_heads = false;

    ScaleSchedule scale_schedule() const { return ScaleSchedule::square(schedule); }
};

// [CLS]/[TYP] conditioning; kEmpty selects the reserved dropout row.
struct Conditioning {
    static constexpr int kEmpty = -1;
    int cls = kEmpty;
    int typ = kEmpty;
};

template <typename T>
struct LayerParams {
    Tensor<T> qkv_w, qkv_b;    // [W,3W], [1,3W]
    Tensor<T> out_w, out_b;    // [W,W], [1,W]
    Tensor<T> fc_w, fc_b;      // [W,4W], [1,4W]
    Tensor<T> proj_w, proj_b;  // [4W,W], [1,W]
    Tensor<T> mod_w, mod_b;    // [W,4W], [1,4W]; (scale1, shift1, scale2, shift2)
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;
    Tensor<T> input_proj;      // [3,W], no bias so zero features project to zero
    Tensor<T> start_emb;       // [1,W]
    Tensor<T> prefix_pos_emb;  // [2,W]
    Tensor<T> pos_emb;         // [sum cells, W], shared by both streams
    Tensor<T> scale_emb;       // [T,W]
    Tensor<T> stream_emb;      // [2,W]
    Tensor<T> cls_emb;         // [n_cls+1, W], last row = EMPTY
    Tensor<T> typ_emb;         // [n_typ+1, W], last row = EMPTY
    std::vector<LayerParams<T>> layers;
    Tensor<T> final_mod_w, final_mod_b;  // [W,2W], [1,2W]
    Tensor<T> head_ctrl_w, head_ctrl_b;  // [W,V], [1,V]
    Tensor<T> head_img_w, head_img_b;    // empty when share_heads
};

// Declared parameter order; checkpoints, Adam state and gradient flattening
// all follow this enumeration.
template <typename T, typename Fn>
void visit_params(ModelParams<T>& p, Fn&& fn) {
    fn("input_proj", p.input_proj);
    fn("start_emb", p.start_emb);
    fn("prefix_pos_emb", p.prefix_pos_emb);
    fn("pos_emb", p.pos_emb);
    fn("scale_emb", p.scale_emb);
    fn("stream_emb", p.stream_emb);
    fn("cls_emb", p.cls_emb);
    fn("typ_emb", p.typ_emb);
    for (size_t l = 0; l < p.layers.size(); ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        auto& lp = p.layers[l];
        fn((pre + "qkv_w").c_str(), lp.qkv_w);
        fn((pre + "qkv_b").c_str(), lp.qkv_b);
        fn((pre + "out_w").c_str(), lp.out_w);
        fn((pre + "out_b").c_str(), lp.out_b);
        fn((pre + "fc_w").c_str(), lp.fc_w);
        fn((pre + "fc_b").c_str(), lp.fc_b);
        fn((pre + "proj_w").c_str(), lp.proj_w);
        fn((pre + "proj_b").c_str(), lp.proj_b);
        fn((pre + "mod_w").c_str(), lp.mod_w);
        fn((pre + "mod_b").c_str(), lp.mod_b);
    }
    fn("final_mod_w", p.final_mod_w);
    fn("final_mod_b", p.final_mod_b);
    fn("head_ctrl_w", p.head_ctrl_w);
    fn("head_ctrl_b", p.head_ctrl_b);
    if (!p.cfg.share_heads) {
        fn("head_img_w", p.head_img_w);
        fn("head_img_b", p.head_img_b);
    }
}

template <typename T, typename Fn>
void visit_params(const ModelParams<T>& p, Fn&& fn) {
    visit_params(const_cast<ModelParams<T>&>(p), [&fn](const char* name, Tensor<T>& t) {
        fn(name, static_cast<const Tensor<T>&>(t));
    });
}

template <typename T>
ModelParams<T> shaped_params(const ModelConfig& cfg) {
    const int w = cfg.width, v = cfg.vocab;
    const ScaleSchedule sched = cfg.scale_schedule();
    ModelParams<T> p;
    p.cfg = cfg;
    p.input_proj = Tensor<T>({3, w});
    p.start_emb = Tensor<T>({1, w});
    p.prefix_pos_emb = Tensor<T>({2, w});
    p.pos_emb = Tensor<T>({sched.positions(), w});
    p.scale_emb = Tensor<T>({sched.count(), w});
    p.stream_emb = Tensor<T>({2, w});
    p.cls_emb = Tensor<T>({cfg.n_cls + 1, w});
    p.typ_emb = Tensor<T>({cfg.n_typ + 1, w});
    p.layers.resize(static_cast<size_t>(cfg.layers));
    for (auto& lp : p.layers) {
        lp.qkv_w = Tensor<T>({w, 3 * w});
        lp.qkv_b = Tensor<T>({1, 3 * w});
        lp.out_w = Tensor<T>({w, w});
        lp.out_b = Tensor<T>({1, w});
        lp.fc_w = Tensor<T>({w, 4 * w});
        lp.fc_b = Tensor<T>({1, 4 * w});
        lp.proj_w = Tensor<T>({4 * w, w});
        lp.proj_b = Tensor<T>({1, w});
        lp.mod_w = Tensor<T>({w, 4 * w});
        lp.mod_b = Tensor<T>({1, 4 * w});
    }
    p.final_mod_w = Tensor<T>({w, 2 * w});
    p.final_mod_b = Tensor<T>({1, 2 * w});
    p.head_ctrl_w = Tensor<T>({w, v});
    p.head_ctrl_b = Tensor<T>({1, v});
    if (!cfg.share_heads) {
        p.head_img_w = Tensor<T>({w, v});
        p.head_img_b = Tensor<T>({1, v});
    }
    return p;
}

// Truncated-normal(0.02) everywhere except the adaptive-norm modulation
// projections and head biases, which start at zero so every block begins as
// an identity modulation (scale 1, shift 0) over plain layer norm.
template <typename T>
ModelParams<T> init_params(uint64_t seed, const ModelConfig& cfg) {
    ModelParams<T> p = shaped_params<T>(cfg);
    Rng rng(mix64(seed ^ 0x1417EA15ull));
    visit_params(p, [&rng](const char* name, Tensor<T>& t) {
        const std::string n(name);
        const bool zero = n.find("mod_") != std::string::npos || n == "head_ctrl_b" || n == "head_img_b";
        if (zero) {
            std::fill(t.data.begin(), t.data.end(), T(0));
        } else {
            for (auto& v : t.data) v = static_cast<T>(rng.trunc_normal(0.02));
        }
    });
    return p;
}

template <typename T>
size_t param_count(const ModelParams<T>& p) {
    size_t n = 0;
    visit_params(p, [&n](const char*, const Tensor<T>& t) { n += t.numel(); });
    return n;
}

// ---- graph-side parameter registration ----

template <typename T>
struct LayerVars {
    using Var = typename Graph<T>::Var;
    Var qkv_w, qkv_b, out_w, out_b, fc_w, fc_b, proj_w, proj_b, mod_w, mod_b;
};

template <typename T>
struct ParamVars {
    using Var = typename Graph<T>::Var;
    Var input_proj, start_emb, prefix_pos_emb, pos_emb, scale_emb, stream_emb, cls_emb, typ_emb;
    std::vector<LayerVars<T>> layers;
    Var final_mod_w, final_mod_b, head_ctrl_w, head_ctrl_b, head_img_w = -1, head_img_b = -1;
};

template <typename T>
ParamVars<T> register_params(Graph<T>& g, const ModelParams<T>& p) {
    ParamVars<T> v;
    v.input_proj = g.param(&p.input_proj);
    v.start_emb = g.param(&p.start_emb);
    v.prefix_pos_emb = g.param(&p.prefix_pos_emb);
    v.pos_emb = g.param(&p.pos_emb);
    v.scale_emb = g.param(&p.scale_emb);
    v.stream_emb = g.param(&p.stream_emb);
    v.cls_emb = g.param(&p.cls_emb);
    v.typ_emb = g.param(&p.typ_emb);
    for (const auto& lp : p.layers) {
        LayerVars<T> lv;
        lv.qkv_w = g.param(&lp.qkv_w);
        lv.qkv_b = g.param(&lp.qkv_b);
        lv.out_w = g.param(&lp.out_w);
        lv.out_b = g.param(&lp.out_b);
        lv.fc_w = g.param(&lp.fc_w);
        lv.fc_b = g.param(&lp.fc_b);
        lv.proj_w = g.param(&lp.proj_w);
        lv.proj_b = g.param(&lp.proj_b);
        lv.mod_w = g.param(&lp.mod_w);
        lv.mod_b = g.param(&lp.mod_b);
        v.layers.push_back(lv);
    }
    v.final_mod_w = g.param(&p.final_mod_w);
    v.final_mod_b = g.param(&p.final_mod_b);
    v.head_ctrl_w = g.param(&p.head_ctrl_w);
    v.head_ctrl_b = g.param(&p.head_ctrl_b);
    if (!p.cfg.share_heads) {
        v.head_img_w = g.param(&p.head_img_w);
        v.head_img_b = g.param(&p.head_img_b);
    }
    return v;
}

// Gradient enumeration matching visit_params order.
template <typename T, typename Fn>
void visit_param_vars(const ParamVars<T>& v, Fn&& fn) {
    fn(v.input_proj);
    fn(v.start_emb);
    fn(v.prefix_pos_emb);
    fn(v.pos_emb);
    fn(v.scale_emb);
    fn(v.stream_emb);
    fn(v.cls_emb);
    fn(v.typ_emb);
    for (const auto& lv : v.layers) {
        fn(lv.qkv_w);
        fn(lv.qkv_b);
        fn(lv.out_w);
        fn(lv.out_b);
        fn(lv.fc_w);
        fn(lv.fc_b);
        fn(lv.proj_w);
        fn(lv.proj_b);
        fn(lv.mod_w);
        fn(lv.mod_b);
    }
    fn(v.final_mod_w);
    fn(v.final_mod_b);
    fn(v.head_ctrl_w);
    fn(v.head_ctrl_b);
    if (v.head_img_w >= 0) {
        fn(v.head_img_w);
        fn(v.head_img_b);
    }
}

// ---- input construction ----

inline int cls_row(const Conditioning& c, const ModelConfig& cfg) {
    if (c.cls == Conditioning::kEmpty) return cfg.n_cls;
    if (c.cls < 0 || c.cls >= cfg.n_cls) throw std::invalid_argument("conditioning: cls out of range");
    return c.cls;
}

inline int typ_row(const Conditioning& c, const ModelConfig& cfg) {
    if (c.typ == Conditioning::kEmpty) return cfg.n_typ;
    if (c.typ < 0 || c.typ >= cfg.n_typ) throw std::invalid_argument("conditioning: typ out of range");
    return c.typ;
}

// Continuous per-scale inputs for one stream: the clamped partial
// reconstruction of scales < t resampled to scale t's grid (scale 0 uses the
// learned start embedding instead and gets no feature row here).
template <typename T>
std::vector<Tensor<T>> stream_prefix_features(const ScaleTokenMaps& tokens, const Codebook& cb,
                                              const ScaleSchedule& sched, int upto_scales) {
    const int fh = sched.full_h(), fw = sched.full_w();
    std::vector<Tensor<T>> feats;
    Tensor<float> recon({fh * fw, 3});
    Tensor<float> clamped({fh * fw, 3});
    for (int t = 0; t < upto_scales; ++t) {
        if (t > 0) {
            for (size_t i = 0; i < recon.data.size(); ++i) clamped.data[i] = std::clamp(recon.data[i], 0.0f, 1.0f);
            Tensor<float> cell = resample_bilinear(clamped, fh, fw, sched.h(t), sched.w(t));
            feats.push_back(cell.template cast<T>());
        }
        // fold scale t's own tokens into the running reconstruction
        Tensor<float> quant({sched.cells(t), 3});
        const int* tok = tokens.tokens.data() + sched.offset(t);
        for (int cell = 0; cell < sched.cells(t); ++cell) {
            const int v = tok[cell];
            if (v < 0 || v >= cb.vocab) throw std::invalid_argument("stream_prefix_features: token out of range");
            std::memcpy(quant.data.data() + 3 * static_cast<size_t>(cell), cb.at(v), 3 * sizeof(float));
        }
        const Tensor<float> up = resample_bilinear(quant, sched.h(t), sched.w(t), fh, fw);
        for (size_t i = 0; i < recon.data.size(); ++i) recon.data[i] += up.data[i];
    }
    return feats;
}

// Assembles the [rows_upto(scales), W] input matrix: prefix rows carry the
// [CLS]/[TYP] embeddings, every scale-block row carries projected prefix
// reconstruction plus position, scale and stream embeddings.
template <typename T>
typename Graph<T>::Var embed_inputs(Graph<T>& g, const ParamVars<T>& pv, const ModelParams<T>& p,
                                    const SequenceLayout& layout, const Codebook& cb,
                                    const ScaleTokenMaps& ctrl_tokens, const ScaleTokenMaps& img_tokens,
                                    int scales, const Conditioning& cond) {
    using Var = typename Graph<T>::Var;
    const ScaleSchedule& sched = layout.sched;
    if (scales < 1 || scales > sched.count()) throw std::invalid_argument("embed_inputs: bad scale count");

    const auto ctrl_feats = stream_prefix_features<T>(ctrl_tokens, cb, sched, scales);
    const auto img_feats = stream_prefix_features<T>(img_tokens, cb, sched, scales);

    std::vector<Var> pieces;
    const Var cls_part = g.gather_rows(pv.cls_emb, {cls_row(cond, p.cfg)});
    const Var typ_part = g.gather_rows(pv.typ_emb, {typ_row(cond, p.cfg)});
    pieces.push_back(g.add(g.concat_rows({cls_part, typ_part}), pv.prefix_pos_emb));

    for (int t = 0; t < scales; ++t) {
        const int cells = sched.cells(t);
        std::vector<int> pos_idx(static_cast<size_t>(cells));
        for (int c = 0; c < cells; ++c) pos_idx[static_cast<size_t>(c)] = sched.offset(t) + c;
        const std::vector<int> scale_idx(static_cast<size_t>(cells), t);
        for (int stream = 0; stream < 2; ++stream) {
            Var base;
            if (t == 0) {
                base = g.gather_rows(pv.start_emb, std::vector<int>(static_cast<size_t>(cells), 0));
            } else {
                const auto& feats = stream == kStreamControl ? ctrl_feats : img_feats;
                base = g.matmul(g.input(feats[static_cast<size_t>(t - 1)]), pv.input_proj);
            }
            Var x = g.add(base, g.gather_rows(pv.pos_emb, pos_idx));
            x = g.add(x, g.gather_rows(pv.scale_emb, scale_idx));
            x = g.add(x, g.gather_rows(pv.stream_emb, std::vector<int>(static_cast<size_t>(cells), stream)));
            pieces.push_back(x);
        }
    }
    return g.concat_rows(pieces);
}

// ---- transformer ----

template <typename T>
struct ModelLogits {
    typename Graph<T>::Var ctrl = -1;  // [#ctrl rows, V]
    typename Graph<T>::Var img = -1;   // [#img rows, V]
};

// Pre-norm GPT-2 style blocks with adaptive normalization: the conditioning
// vector produces per-block (scale, shift) for both norms; block-causal
// attention runs over the supplied block runs.
//
// only_scale >= 0 restricts the logits gather to that scale's rows (the
// sampling path); -1 gathers every scale present.
template <typename T>
ModelLogits<T> transformer_forward(Graph<T>& g, const ParamVars<T>& pv, const ModelParams<T>& p,
                                   typename Graph<T>::Var inputs, const Conditioning& cond,
                                   const std::vector<AttnBlock>& blocks, const SequenceLayout& layout, int scales,
                                   int only_scale = -1, bool want_ctrl = true, bool want_img = true) {
    using Var = typename Graph<T>::Var;
    const ModelConfig& cfg = p.cfg;
    const int w = cfg.width;

    const Var cond_vec =
        g.add(g.gather_rows(pv.cls_emb, {cls_row(cond, cfg)}), g.gather_rows(pv.typ_emb, {typ_row(cond, cfg)}));
    const Var cmod = g.gelu(cond_vec);

    auto modulated_norm = [&](Var x, Var mods, int idx) {
        const Var sc = g.slice_cols(mods, 2 * idx * w, (2 * idx + 1) * w);
        const Var sh = g.slice_cols(mods, (2 * idx + 1) * w, (2 * idx + 2) * w);
        return g.add_rowvec(g.mul_rowvec(g.layernorm_rows(x), g.add_const(sc, T(1))), sh);
    };

    Var x = inputs;
    for (const auto& lv : pv.layers) {
        const Var mods = g.add_rowvec(g.matmul(cmod, lv.mod_w), lv.mod_b);
        Var h = modulated_norm(x, mods, 0);
        const Var qkv = g.add_rowvec(g.matmul(h, lv.qkv_w), lv.qkv_b);
        const Var att = g.attention(g.slice_cols(qkv, 0, w), g.slice_cols(qkv, w, 2 * w),
                                    g.slice_cols(qkv, 2 * w, 3 * w), cfg.heads, blocks);
        x = g.add(x, g.add_rowvec(g.matmul(att, lv.out_w), lv.out_b));
        Var h2 = modulated_norm(x, mods, 1);
        const Var mid = g.gelu(g.add_rowvec(g.matmul(h2, lv.fc_w), lv.fc_b));
        x = g.add(x, g.add_rowvec(g.matmul(mid, lv.proj_w), lv.proj_b));
    }

    const Var fmods = g.add_rowvec(g.matmul(cmod, pv.final_mod_w), pv.final_mod_b);
    const Var fsc = g.slice_cols(fmods, 0, w);
    const Var fsh = g.slice_cols(fmods, w, 2 * w);
    const Var xf = g.add_rowvec(g.mul_rowvec(g.layernorm_rows(x), g.add_const(fsc, T(1))), fsh);

    auto rows_for = [&](bool ctrl_stream) {
        if (only_scale < 0) return ctrl_stream ? layout.ctrl_rows(scales) : layout.img_rows(scales);
        const int begin = ctrl_stream ? layout.ctrl_begin[static_cast<size_t>(only_scale)]
                                      : layout.img_begin[static_cast<size_t>(only_scale)];
        std::vector<int> rows(static_cast<size_t>(layout.sched.cells(only_scale)));
        for (size_t i = 0; i < rows.size(); ++i) rows[i] = begin + static_cast<int>(i);
        return rows;
    };

    ModelLogits<T> out;
    if (want_ctrl) {
        out.ctrl = g.add_rowvec(g.matmul(g.gather_rows(xf, rows_for(true)), pv.head_ctrl_w), pv.head_ctrl_b);
    }
    if (want_img) {
        const auto hw = p.cfg.share_heads ? pv.head_ctrl_w : pv.head_img_w;
        const auto hb = p.cfg.share_heads ? pv.head_ctrl_b : pv.head_img_b;
        out.img = g.add_rowvec(g.matmul(g.gather_rows(xf, rows_for(false)), hw), hb);
    }
    return out;
}

// Full training-style forward: teacher-forced inputs for every scale, logits
// for both streams at every scale.
template <typename T>
ModelLogits<T> model_forward(Graph<T>& g, const ParamVars<T>& pv, const ModelParams<T>& p,
                             const SequenceLayout& layout, const Codebook& cb, const ScaleTokenMaps& ctrl_tokens,
                             const ScaleTokenMaps& img_tokens, const Conditioning& cond) {
    const int scales = layout.sched.count();
    const auto inputs = embed_inputs(g, pv, p, layout, cb, ctrl_tokens, img_tokens, scales, cond);
    return transformer_forward(g, pv, p, inputs, cond, layout.attention_blocks(scales), layout, scales);
}

// Mean cross-entropy over all control and image positions, equally weighted;
// also exposes the per-stream terms.
template <typename T>
struct ModelLoss {
    typename Graph<T>::Var total, ctrl, img;
};

template <typename T>
ModelLoss<T> model_loss(Graph<T>& g, const ModelLogits<T>& logits, const ScaleTokenMaps& ctrl_tokens,
                        const ScaleTokenMaps& img_tokens) {
    ModelLoss<T> out;
    out.ctrl = g.cross_entropy_mean(logits.ctrl, ctrl_tokens.tokens);
    out.img = g.cross_entropy_mean(logits.img, img_tokens.tokens);
    out.total = g.add(g.scale(out.ctrl, T(0.5)), g.scale(out.img, T(0.5)));
    return out;
}

// Eager logits for one scale of one generation step.
struct ScaleLogits {
    Tensor<float> ctrl, img;
};

inline ScaleLogits forward_scale_logits(const ModelParams<float>& p, const SequenceLayout& layout,
                                        const Codebook& cb, const ScaleTokenMaps& ctrl_tokens,
                                        const ScaleTokenMaps& img_tokens, int t, const Conditioning& cond,
                                        bool want_ctrl, bool want_img) {
    Graph<float> g(false);
    const ParamVars<float> pv = register_params(g, p);
    const auto inputs = embed_inputs(g, pv, p, layout, cb, ctrl_tokens, img_tokens, t + 1, cond);
    const auto logits = transformer_forward(g, pv, p, inputs, cond, layout.attention_blocks(t + 1), layout, t + 1,
                                            t, want_ctrl, want_img);
    ScaleLogits out;
    if (want_ctrl) out.ctrl = g.value(logits.ctrl);
    if (want_img) out.img = g.value(logits.img);
    return out;
}

}  // namespace cvar
