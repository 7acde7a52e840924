#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvar/checkpoint.hpp"
#include "cvar/eval.hpp"
#include "cvar/guidance.hpp"
#include "cvar/threads.hpp"
#include "cvar/trainer.hpp"

namespace cvar {

// Loaded artifacts every evaluation task works against.
struct EvalContext {
    ModelParams<float> params;
    Codebook cb;
    ScaleSchedule sched;
    std::string manifest_dir;
    std::vector<ManifestRecord> manifest;
    int threads = 1;

    const ManifestRecord& record(int i) const { return manifest[static_cast<size_t>(i) % manifest.size()]; }
};

inline EvalContext load_eval_context(const std::string& ckpt_path, const std::string& codebook_path,
                                     const std::string& manifest_path, int threads) {
    EvalContext ctx;
    CheckpointMeta meta;
    ctx.params = read_checkpoint(ckpt_path, &meta);
    ctx.cb = read_codebook(codebook_path);
    if (!meta.codebook_hash.empty() && meta.codebook_hash != ctx.cb.hash()) {
        throw std::runtime_error("eval: codebook does not match the checkpoint's codebook hash");
    }
    ctx.sched = ctx.params.cfg.scale_schedule();
    ctx.manifest = load_manifest(manifest_path);
    const auto p = std::filesystem::path(manifest_path).parent_path();
    ctx.manifest_dir = p.empty() ? std::string(".") : p.string();
    ctx.threads = threads;
    return ctx;
}

inline std::string control_path(const ManifestRecord& r, ControlKind kind) {
    switch (kind) {
        case ControlKind::Mask: return r.mask;
        case ControlKind::Edge: return r.edge;
        case ControlKind::Depth: return r.depth;
        case ControlKind::Normal: return r.normal;
    }
    throw std::logic_error("control_path: bad kind");
}

struct AlignmentResult {
    std::vector<double> f1;
    double mean = 0, se = 0;
    double ffd = -1;
};

// Control-to-image alignment: generate conditioned on manifest controls and
// score each output image against the control it was given.
inline AlignmentResult eval_c2i_alignment(const EvalContext& ctx, ControlKind kind, const GuidanceSpec& g,
                                          const SamplerConfig& sc, int n, uint64_t seed, bool with_ffd = false) {
    AlignmentResult out;
    out.f1.assign(static_cast<size_t>(n), 0.0);
    std::vector<Image> generated(static_cast<size_t>(n));
    parallel_for(n, ctx.threads, [&](int i) {
        const ManifestRecord& r = ctx.record(i);
        const Image control = read_ppm(ctx.manifest_dir + "/" + control_path(r, kind));
        TaskSpec task;
        task.mode = TaskMode::ControlToImage;
        task.payload_ctrl = encode(control, ctx.cb, ctx.sched);
        task.cond = Conditioning{r.cls, static_cast<int>(kind)};
        const GenerateResult res = generate(ctx.params, ctx.cb, ctx.sched, task, g, sc,
                                            mix64(seed + static_cast<uint64_t>(i)));
        generated[static_cast<size_t>(i)] = res.img_rgb;
        out.f1[static_cast<size_t>(i)] = boundary_f1(control, res.img_rgb);
    });
    out.mean = mean_of(out.f1);
    out.se = stderr_of(out.f1);
    if (with_ffd) {
        std::vector<const Image*> gen_ptrs, real;
        std::vector<Image> real_imgs;
        for (auto& im : generated) gen_ptrs.push_back(&im);
        const int m = std::min<int>(n, static_cast<int>(ctx.manifest.size()));
        for (int i = 0; i < m; ++i) {
            real_imgs.push_back(read_ppm(ctx.manifest_dir + "/" + ctx.record(i).image));
        }
        for (auto& im : real_imgs) real.push_back(&im);
        out.ffd = feature_frechet_distance(gen_ptrs, real);
    }
    return out;
}

// Unconditional baseline: free joint generation, scored against the same
// controls the conditional run saw.
inline AlignmentResult eval_uncond_alignment(const EvalContext& ctx, ControlKind kind, const SamplerConfig& sc,
                                             int n, uint64_t seed) {
    AlignmentResult out;
    out.f1.assign(static_cast<size_t>(n), 0.0);
    parallel_for(n, ctx.threads, [&](int i) {
        const ManifestRecord& r = ctx.record(i);
        const Image control = read_ppm(ctx.manifest_dir + "/" + control_path(r, kind));
        TaskSpec task;
        task.mode = TaskMode::JointGen;
        task.cond = Conditioning{};  // EMPTY conditioning
        GuidanceSpec g;
        g.gamma_cls = g.gamma_typ = g.gamma_pix = 0.0;
        const GenerateResult res = generate(ctx.params, ctx.cb, ctx.sched, task, g, sc,
                                            mix64(seed + 0x0BA5Eull + static_cast<uint64_t>(i)));
        out.f1[static_cast<size_t>(i)] = boundary_f1(control, res.img_rgb);
    });
    out.mean = mean_of(out.f1);
    out.se = stderr_of(out.f1);
    return out;
}

struct I2CResult {
    double accuracy = 0;
    double majority_baseline = 0;
    std::vector<double> per_scale;
};

// Image-to-control token accuracy on held-out samples, against the
// frequency of the most common truth token (the majority baseline).
inline I2CResult eval_i2c_accuracy(const EvalContext& ctx, ControlKind kind, const GuidanceSpec& g,
                                   const SamplerConfig& sc, int n, uint64_t seed) {
    std::vector<double> overall(static_cast<size_t>(n), 0.0);
    std::vector<std::vector<double>> per_scale(static_cast<size_t>(n));
    std::map<int, long> token_counts;
    long total_tokens = 0;
    std::vector<ScaleTokenMaps> truths(static_cast<size_t>(n));
    parallel_for(n, ctx.threads, [&](int i) {
        const ManifestRecord& r = ctx.record(i);
        const Image image = read_ppm(ctx.manifest_dir + "/" + r.image);
        const Image control = read_ppm(ctx.manifest_dir + "/" + control_path(r, kind));
        truths[static_cast<size_t>(i)] = encode(control, ctx.cb, ctx.sched);
        TaskSpec task;
        task.mode = TaskMode::ImageToControl;
        task.payload_img = encode(image, ctx.cb, ctx.sched);
        task.cond = Conditioning{r.cls, static_cast<int>(kind)};
        const GenerateResult res = generate(ctx.params, ctx.cb, ctx.sched, task, g, sc,
                                            mix64(seed + 0x12Cull + static_cast<uint64_t>(i)));
        const TokenAccuracy acc = control_token_accuracy(res.ctrl, truths[static_cast<size_t>(i)], ctx.sched);
        overall[static_cast<size_t>(i)] = acc.overall;
        per_scale[static_cast<size_t>(i)] = acc.per_scale;
    });
    for (const auto& t : truths) {
        for (int tok : t.tokens) {
            token_counts[tok]++;
            ++total_tokens;
        }
    }
    long majority = 0;
    for (const auto& [tok, cnt] : token_counts) majority = std::max(majority, cnt);

    I2CResult res;
    res.accuracy = mean_of(overall);
    res.majority_baseline = static_cast<double>(majority) / static_cast<double>(total_tokens);
    res.per_scale.assign(per_scale[0].size(), 0.0);
    for (const auto& ps : per_scale) {
        for (size_t s = 0; s < ps.size(); ++s) res.per_scale[s] += ps[s] / n;
    }
    return res;
}

// gamma_pix sweep with gamma_cls = gamma_typ = 1 held fixed.
inline std::vector<GammaPoint> eval_gamma_sweep(const EvalContext& ctx, ControlKind kind,
                                                const std::vector<double>& gammas, const SamplerConfig& sc, int n,
                                                uint64_t seed, bool with_ffd = true) {
    std::vector<GammaPoint> points;
    for (double gamma : gammas) {
        GuidanceSpec g;
        g.gamma_cls = 1.0;
        g.gamma_typ = 1.0;
        g.gamma_pix = gamma;
        const AlignmentResult r = eval_c2i_alignment(ctx, kind, g, sc, n, seed, with_ffd);
        GammaPoint pt;
        pt.gamma = gamma;
        pt.mean_f1 = r.mean;
        pt.stderr_f1 = r.se;
        pt.ffd = r.ffd;
        pt.n = n;
        points.push_back(pt);
    }
    return points;
}

}  // namespace cvar
