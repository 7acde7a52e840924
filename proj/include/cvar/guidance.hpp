#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvar/model.hpp"
#include "cvar/rng.hpp"
#include "cvar/sequence.hpp"
#include "cvar/synth.hpp"
#include "cvar/tokenizer.hpp"

namespace cvar {

// ---- guidance scales ----

enum class AnnealMode { Off, Linear };

inline AnnealMode anneal_mode_from_name(const std::string& s) {
    if (s == "off") return AnnealMode::Off;
    if (s == "linear") return AnnealMode::Linear;
    throw std::invalid_argument("unknown anneal mode: " + s);
}

struct GuidanceSpec {
    double gamma_cls = 2.0;
    double gamma_typ = 2.0;
    double gamma_pix = 2.0;
    AnnealMode anneal = AnnealMode::Off;

    void validate() const {
        for (double g : {gamma_cls, gamma_typ, gamma_pix}) {
            if (!(g >= 0.0) || !std::isfinite(g)) throw std::invalid_argument("guidance: gamma must be >= 0");
        }
    }
};

// Linear annealing scales gamma by t/T at iteration t (t may be 0..T).
inline double anneal(double gamma, int t, int total, AnnealMode mode) {
    if (mode == AnnealMode::Off) return gamma;
    return gamma * static_cast<double>(t) / static_cast<double>(total);
}

// ---- four-branch combination ----
//
// Mathematically x* = x_uncond + g_cls (x_full - x_typ) + g_typ (x_typ -
// x_tf) + g_pix (x_tf - x_uncond). Evaluated in collapsed-coefficient form
//
//   x* = (1-g_pix) x_uncond + g_cls x_full + (g_typ-g_cls) x_typ
//        + (g_pix-g_typ) x_tf
//
// left to right, so g=(1,1,1) reproduces x_full and g=(0,0,0) reproduces
// x_uncond bit-for-bit (the grouped-difference form cannot cancel exactly in
// floating point).
template <typename T>
void tfg_combine(const T* x_uncond, const T* x_tf, const T* x_typ, const T* x_full, int n, double g_cls,
                 double g_typ, double g_pix, T* out) {
    const T wu = static_cast<T>(1.0 - g_pix);
    const T wf = static_cast<T>(g_cls);
    const T wt = static_cast<T>(g_typ - g_cls);
    const T wtf = static_cast<T>(g_pix - g_typ);
    for (int i = 0; i < n; ++i) {
        out[i] = wu * x_uncond[i] + wf * x_full[i] + wt * x_typ[i] + wtf * x_tf[i];
    }
}

template <typename T>
std::vector<T> tfg_combine(const std::vector<T>& x_uncond, const std::vector<T>& x_tf, const std::vector<T>& x_typ,
                           const std::vector<T>& x_full, double g_cls, double g_typ, double g_pix) {
    if (x_uncond.size() != x_tf.size() || x_tf.size() != x_typ.size() || x_typ.size() != x_full.size()) {
        throw std::invalid_argument("tfg_combine: branch size mismatch");
    }
    std::vector<T> out(x_uncond.size());
    tfg_combine(x_uncond.data(), x_tf.data(), x_typ.data(), x_full.data(), static_cast<int>(out.size()), g_cls,
                g_typ, g_pix, out.data());
    return out;
}

// Two-branch classifier-free combination, same evaluation discipline.
template <typename T>
void cfg_combine(const T* x_uncond, const T* x_cond, int n, double gamma, T* out) {
    const T wu = static_cast<T>(1.0 - gamma);
    const T wc = static_cast<T>(gamma);
    for (int i = 0; i < n; ++i) out[i] = wu * x_uncond[i] + wc * x_cond[i];
}

// ---- top-k / top-p sampling ----

struct SamplerConfig {
    int topk = 64;
    double topp = 0.96;
};

// Restrict to the k largest logits, then to the smallest probability prefix
// reaching mass p, renormalize and draw. Ties order by index.
inline int sample_topk_topp(const float* logits, int vocab, int k, double p, Rng& rng) {
    if (k < 1 || k > vocab) throw std::invalid_argument("sample_topk_topp: k out of range");
    if (!(p > 0.0) || p > 1.0) throw std::invalid_argument("sample_topk_topp: p out of range");
    std::vector<int> idx(static_cast<size_t>(vocab));
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (logits[a] != logits[b]) return logits[a] > logits[b];
        return a < b;
    });
    if (!(logits[idx[0]] > -std::numeric_limits<float>::infinity())) {
        throw std::invalid_argument("sample_topk_topp: no finite logits");
    }
    const double mx = logits[idx[0]];
    std::vector<double> probs(static_cast<size_t>(k));
    double z = 0;
    for (int i = 0; i < k; ++i) {
        probs[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits[idx[static_cast<size_t>(i)]]) - mx);
        z += probs[static_cast<size_t>(i)];
    }
    // nucleus: smallest prefix with cumulative mass >= p (probabilities are
    // already sorted descending because logits are)
    int support = k;
    double cum = 0;
    for (int i = 0; i < k; ++i) {
        cum += probs[static_cast<size_t>(i)] / z;
        if (cum >= p) {
            support = i + 1;
            break;
        }
    }
    double mass = 0;
    for (int i = 0; i < support; ++i) mass += probs[static_cast<size_t>(i)];
    const double u = rng.uniform() * mass;
    double acc = 0;
    for (int i = 0; i < support; ++i) {
        acc += probs[static_cast<size_t>(i)];
        if (u < acc) return idx[static_cast<size_t>(i)];
    }
    return idx[static_cast<size_t>(support - 1)];
}

inline int sample_topk_topp(const Tensor<float>& logits_row, int row, const SamplerConfig& sc, Rng& rng) {
    return sample_topk_topp(logits_row.data.data() + static_cast<size_t>(row) * logits_row.shape[1],
                            logits_row.shape[1], sc.topk, sc.topp, rng);
}

// ---- task specification ----

enum class TaskMode { JointGen, ControlToImage, ImageToControl, Completion, ControlToControl };

inline TaskMode task_mode_from_name(const std::string& s) {
    if (s == "joint") return TaskMode::JointGen;
    if (s == "c2i") return TaskMode::ControlToImage;
    if (s == "i2c") return TaskMode::ImageToControl;
    if (s == "complete") return TaskMode::Completion;
    if (s == "c2c") return TaskMode::ControlToControl;
    throw std::invalid_argument("unknown task mode: " + s);
}

inline const char* task_mode_name(TaskMode m) {
    switch (m) {
        case TaskMode::JointGen: return "joint";
        case TaskMode::ControlToImage: return "c2i";
        case TaskMode::ImageToControl: return "i2c";
        case TaskMode::Completion: return "complete";
        case TaskMode::ControlToControl: return "c2c";
    }
    return "?";
}

// Payloads arrive pre-tokenized with the generation codebook/schedule.
// ControlToControl forces the input control through the image-role stream
// and sets [TYP] to the output kind, sharing the ImageToControl code path.
struct TaskSpec {
    TaskMode mode = TaskMode::JointGen;
    ScaleTokenMaps payload_ctrl;
    ScaleTokenMaps payload_img;
    std::vector<uint8_t> known;  // Completion: H*W nonzero = known
    Conditioning cond;
};

// A scale-t cell is forced when at least theta of its receptive pixel box is
// known.
inline std::vector<uint8_t> known_cells(const std::vector<uint8_t>& known, const ScaleSchedule& sched, int t,
                                        double theta = 0.5) {
    const int fh = sched.full_h(), fw = sched.full_w();
    if (static_cast<int>(known.size()) != fh * fw) throw std::invalid_argument("known_cells: bad mask size");
    const int h = sched.h(t), w = sched.w(t);
    std::vector<uint8_t> out(static_cast<size_t>(h) * w, 0);
    for (int i = 0; i < h; ++i) {
        const int y0 = i * fh / h, y1 = (i + 1) * fh / h;
        for (int j = 0; j < w; ++j) {
            const int x0 = j * fw / w, x1 = (j + 1) * fw / w;
            int cnt = 0;
            for (int y = y0; y < y1; ++y) {
                for (int x = x0; x < x1; ++x) cnt += known[static_cast<size_t>(y) * fw + x] ? 1 : 0;
            }
            const int total = (y1 - y0) * (x1 - x0);
            out[static_cast<size_t>(i) * w + j] = cnt * 2 >= total * 2 * theta ? 1 : 0;
        }
    }
    return out;
}

// ---- generation ----

struct GenerateResult {
    ScaleTokenMaps ctrl, img;
    Image ctrl_rgb, img_rgb;
    std::vector<int> forwards_per_scale;
    int total_forwards = 0;
};

namespace detail {

inline ScaleTokenMaps empty_tokens(const ScaleSchedule& sched) {
    ScaleTokenMaps t;
    t.tokens.assign(static_cast<size_t>(sched.positions()), 0);
    return t;
}

inline void require_payload(const ScaleTokenMaps& t, const ScaleSchedule& sched, const char* what) {
    if (static_cast<int>(t.tokens.size()) != sched.positions()) {
        throw std::invalid_argument(std::string("generate: task requires a tokenized ") + what + " payload");
    }
}

}  // namespace detail

// Scale-by-scale sampler. Teacher-forced modes keep four branch states (Eq.
// of the combination above); JointGen and Completion use the two-branch
// classifier-free form with gamma_cls. One token draw per free-stream cell is
// shared across every branch; the unconditional branch's counterpart stream
// self-samples from its own logits on a separate rng stream.
inline GenerateResult generate(const ModelParams<float>& params, const Codebook& cb, const ScaleSchedule& sched,
                               const TaskSpec& task, const GuidanceSpec& gspec, const SamplerConfig& sampler,
                               uint64_t seed) {
    gspec.validate();
    const SequenceLayout layout = SequenceLayout::build(sched);
    const int T = sched.count();
    Rng rng_main = Rng(mix64(seed ^ 0x9E7A11ull)).derive(1);
    Rng rng_aux = Rng(mix64(seed ^ 0x9E7A11ull)).derive(2);

    GenerateResult res;
    res.forwards_per_scale.assign(static_cast<size_t>(T), 0);

    const bool teacher_forced =
        task.mode == TaskMode::ControlToImage || task.mode == TaskMode::ImageToControl ||
        task.mode == TaskMode::ControlToControl;

    if (teacher_forced) {
        const bool force_ctrl = task.mode == TaskMode::ControlToImage;
        const ScaleTokenMaps& payload = force_ctrl ? task.payload_ctrl : task.payload_img;
        detail::require_payload(payload, sched, force_ctrl ? "control" : "image");

        ScaleTokenMaps free_state = detail::empty_tokens(sched);   // shared sampled stream
        ScaleTokenMaps unc_forced = detail::empty_tokens(sched);   // uncond branch's self-sampled stream
        const Conditioning cond_full = task.cond;
        const Conditioning cond_typ{Conditioning::kEmpty, task.cond.typ};
        const Conditioning cond_none{Conditioning::kEmpty, Conditioning::kEmpty};

        for (int t = 0; t < T; ++t) {
            auto fwd = [&](const ScaleTokenMaps& forced_stream, const ScaleTokenMaps& free_stream,
                           const Conditioning& cond, bool want_forced_logits) {
                res.forwards_per_scale[static_cast<size_t>(t)]++;
                const ScaleTokenMaps& as_ctrl = force_ctrl ? forced_stream : free_stream;
                const ScaleTokenMaps& as_img = force_ctrl ? free_stream : forced_stream;
                return forward_scale_logits(params, layout, cb, as_ctrl, as_img, t, cond,
                                            force_ctrl ? want_forced_logits : true,
                                            force_ctrl ? true : want_forced_logits);
            };
            const ScaleLogits l_full = fwd(payload, free_state, cond_full, false);
            const ScaleLogits l_typ = fwd(payload, free_state, cond_typ, false);
            const ScaleLogits l_tf = fwd(payload, free_state, cond_none, false);
            const ScaleLogits l_unc = fwd(unc_forced, free_state, cond_none, true);

            const Tensor<float>& free_full = force_ctrl ? l_full.img : l_full.ctrl;
            const Tensor<float>& free_typ = force_ctrl ? l_typ.img : l_typ.ctrl;
            const Tensor<float>& free_tf = force_ctrl ? l_tf.img : l_tf.ctrl;
            const Tensor<float>& free_unc = force_ctrl ? l_unc.img : l_unc.ctrl;
            const Tensor<float>& aux_unc = force_ctrl ? l_unc.ctrl : l_unc.img;

            // unconditional branch evolves its own counterpart stream
            for (int c = 0; c < sched.cells(t); ++c) {
                unc_forced.tokens[static_cast<size_t>(sched.offset(t) + c)] =
                    sample_topk_topp(aux_unc, c, sampler, rng_aux);
            }

            const double gc = anneal(gspec.gamma_cls, t + 1, T, gspec.anneal);
            const double gt = anneal(gspec.gamma_typ, t + 1, T, gspec.anneal);
            const double gp = anneal(gspec.gamma_pix, t + 1, T, gspec.anneal);
            const int vocab = free_full.shape[1];
            std::vector<float> combined(static_cast<size_t>(vocab));
            for (int c = 0; c < sched.cells(t); ++c) {
                const size_t off = static_cast<size_t>(c) * vocab;
                tfg_combine(free_unc.data.data() + off, free_tf.data.data() + off, free_typ.data.data() + off,
                            free_full.data.data() + off, vocab, gc, gt, gp, combined.data());
                free_state.tokens[static_cast<size_t>(sched.offset(t) + c)] =
                    sample_topk_topp(combined.data(), vocab, sampler.topk, sampler.topp, rng_main);
            }
        }

        res.ctrl = force_ctrl ? payload : free_state;
        res.img = force_ctrl ? free_state : payload;
    } else {
        // JointGen / Completion: two branches, classic guidance with gamma_cls
        const bool completion = task.mode == TaskMode::Completion;
        if (completion) {
            detail::require_payload(task.payload_ctrl, sched, "control");
            detail::require_payload(task.payload_img, sched, "image");
            if (static_cast<int>(task.known.size()) != sched.full_h() * sched.full_w()) {
                throw std::invalid_argument("generate: completion requires a known-region mask");
            }
        }
        ScaleTokenMaps ctrl_state = detail::empty_tokens(sched);
        ScaleTokenMaps img_state = detail::empty_tokens(sched);
        const Conditioning cond_none{Conditioning::kEmpty, Conditioning::kEmpty};

        for (int t = 0; t < T; ++t) {
            res.forwards_per_scale[static_cast<size_t>(t)] += 2;
            const ScaleLogits l_cond =
                forward_scale_logits(params, layout, cb, ctrl_state, img_state, t, task.cond, true, true);
            const ScaleLogits l_unc =
                forward_scale_logits(params, layout, cb, ctrl_state, img_state, t, cond_none, true, true);

            const double g = anneal(gspec.gamma_cls, t + 1, T, gspec.anneal);
            const std::vector<uint8_t> forced =
                completion ? known_cells(task.known, sched, t) : std::vector<uint8_t>();
            const int vocab = l_cond.ctrl.shape[1];
            std::vector<float> combined(static_cast<size_t>(vocab));
            auto sample_block = [&](const Tensor<float>& unc, const Tensor<float>& cond, ScaleTokenMaps& state,
                                    const ScaleTokenMaps& payload) {
                for (int c = 0; c < sched.cells(t); ++c) {
                    const size_t at = static_cast<size_t>(sched.offset(t) + c);
                    if (completion && forced[static_cast<size_t>(c)]) {
                        state.tokens[at] = payload.tokens[at];
                        continue;
                    }
                    const size_t off = static_cast<size_t>(c) * vocab;
                    cfg_combine(unc.data.data() + off, cond.data.data() + off, vocab, g, combined.data());
                    state.tokens[at] = sample_topk_topp(combined.data(), vocab, sampler.topk, sampler.topp, rng_main);
                }
            };
            sample_block(l_unc.ctrl, l_cond.ctrl, ctrl_state, task.payload_ctrl);
            sample_block(l_unc.img, l_cond.img, img_state, task.payload_img);
        }
        res.ctrl = ctrl_state;
        res.img = img_state;
    }

    for (int f : res.forwards_per_scale) res.total_forwards += f;
    res.ctrl_rgb = decode(res.ctrl, cb, sched);
    res.img_rgb = decode(res.img, cb, sched);
    return res;
}

// ---- exact enumeration oracle for the guidance algebra ----

// Explicit joint distribution p(I, C, c, c_t) over small finite domains.
struct JointTable {
    int n_i = 4, n_c = 4, n_cls = 2, n_typ = 2;
    std::vector<double> p;  // indexed [i][c][cls][typ]

    double& at(int i, int c, int cls, int typ) {
        return p[static_cast<size_t>(((i * n_c + c) * n_cls + cls) * n_typ + typ)];
    }
    double at(int i, int c, int cls, int typ) const {
        return p[static_cast<size_t>(((i * n_c + c) * n_cls + cls) * n_typ + typ)];
    }

    void normalize() {
        double s = 0;
        for (double v : p) s += v;
        if (s <= 0) throw std::invalid_argument("JointTable: non-positive mass");
        for (double& v : p) v /= s;
    }

    static JointTable random(Rng& rng, int n_i = 4, int n_c = 4, int n_cls = 2, int n_typ = 2) {
        JointTable t;
        t.n_i = n_i;
        t.n_c = n_c;
        t.n_cls = n_cls;
        t.n_typ = n_typ;
        t.p.resize(static_cast<size_t>(n_i) * n_c * n_cls * n_typ);
        for (double& v : t.p) v = rng.uniform(0.01, 1.0);
        t.normalize();
        return t;
    }

    // product of independent marginals
    static JointTable independent(Rng& rng, int n_i = 4, int n_c = 4, int n_cls = 2, int n_typ = 2) {
        auto marg = [&rng](int n) {
            std::vector<double> m(static_cast<size_t>(n));
            double s = 0;
            for (double& v : m) {
                v = rng.uniform(0.05, 1.0);
                s += v;
            }
            for (double& v : m) v /= s;
            return m;
        };
        const auto mi = marg(n_i), mc = marg(n_c), mcl = marg(n_cls), mt = marg(n_typ);
        JointTable t;
        t.n_i = n_i;
        t.n_c = n_c;
        t.n_cls = n_cls;
        t.n_typ = n_typ;
        t.p.resize(static_cast<size_t>(n_i) * n_c * n_cls * n_typ);
        for (int i = 0; i < n_i; ++i) {
            for (int c = 0; c < n_c; ++c) {
                for (int cl = 0; cl < n_cls; ++cl) {
                    for (int ty = 0; ty < n_typ; ++ty) {
                        t.at(i, c, cl, ty) = mi[static_cast<size_t>(i)] * mc[static_cast<size_t>(c)] *
                                             mcl[static_cast<size_t>(cl)] * mt[static_cast<size_t>(ty)];
                    }
                }
            }
        }
        return t;
    }
};

// p(I | C=c0, cls, typ) by direct summation.
inline std::vector<double> oracle_exact(const JointTable& t, int c0, int cls, int typ) {
    std::vector<double> out(static_cast<size_t>(t.n_i));
    double z = 0;
    for (int i = 0; i < t.n_i; ++i) {
        out[static_cast<size_t>(i)] = t.at(i, c0, cls, typ);
        z += out[static_cast<size_t>(i)];
    }
    for (double& v : out) v /= z;
    return out;
}

// Branch "logits" as exact log-joints, combined with unit scales, softmaxed
// over I and compared to the enumeration oracle. Returns the max absolute
// deviation over every (C0, cls, typ).
inline double verify_tfg_identity(const JointTable& t, double g_cls = 1.0, double g_typ = 1.0,
                                  double g_pix = 1.0) {
    const int ni = t.n_i;
    double worst = 0;
    for (int c0 = 0; c0 < t.n_c; ++c0) {
        for (int cls = 0; cls < t.n_cls; ++cls) {
            for (int typ = 0; typ < t.n_typ; ++typ) {
                std::vector<double> x_full(static_cast<size_t>(ni)), x_typ(static_cast<size_t>(ni)),
                    x_tf(static_cast<size_t>(ni)), x_unc(static_cast<size_t>(ni));
                for (int i = 0; i < ni; ++i) {
                    double p_ic_ct = 0;      // p(I=i, C=c0, typ)
                    double p_ic = 0;         // p(I=i, C=c0)
                    double p_i = 0;          // p(I=i)
                    for (int cl2 = 0; cl2 < t.n_cls; ++cl2) p_ic_ct += t.at(i, c0, cl2, typ);
                    for (int cl2 = 0; cl2 < t.n_cls; ++cl2) {
                        for (int ty2 = 0; ty2 < t.n_typ; ++ty2) p_ic += t.at(i, c0, cl2, ty2);
                    }
                    for (int c2 = 0; c2 < t.n_c; ++c2) {
                        for (int cl2 = 0; cl2 < t.n_cls; ++cl2) {
                            for (int ty2 = 0; ty2 < t.n_typ; ++ty2) p_i += t.at(i, c2, cl2, ty2);
                        }
                    }
                    // conditionals; the shared normalizers are additive
                    // constants in log space and cancel in the softmax
                    x_full[static_cast<size_t>(i)] = std::log(t.at(i, c0, cls, typ));
                    x_typ[static_cast<size_t>(i)] = std::log(p_ic_ct);
                    x_tf[static_cast<size_t>(i)] = std::log(p_ic);
                    x_unc[static_cast<size_t>(i)] = std::log(p_i);
                }
                const std::vector<double> combined = tfg_combine(x_unc, x_tf, x_typ, x_full, g_cls, g_typ, g_pix);
                // softmax over I
                double mx = combined[0];
                for (double v : combined) mx = std::max(mx, v);
                std::vector<double> sm(static_cast<size_t>(ni));
                double z = 0;
                for (int i = 0; i < ni; ++i) {
                    sm[static_cast<size_t>(i)] = std::exp(combined[static_cast<size_t>(i)] - mx);
                    z += sm[static_cast<size_t>(i)];
                }
                const std::vector<double> exact = oracle_exact(t, c0, cls, typ);
                for (int i = 0; i < ni; ++i) {
                    worst = std::max(worst, std::fabs(sm[static_cast<size_t>(i)] / z - exact[static_cast<size_t>(i)]));
                }
            }
        }
    }
    return worst;
}

// Oracle sweep used by the CLI and the acceptance gate.
inline double verify_guidance_suite(int tables, uint64_t seed) {
    Rng rng(mix64(seed ^ 0x0AC1Eull));
    double worst = 0;
    for (int i = 0; i < tables; ++i) {
        const JointTable t = JointTable::random(rng);
        worst = std::max(worst, verify_tfg_identity(t));
    }
    return worst;
}

}  // namespace cvar
