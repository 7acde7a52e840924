#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cvar/image.hpp"
#include "cvar/rng.hpp"
#include "cvar/synth.hpp"
#include "cvar/tokenizer.hpp"

namespace cvar {

// ---- boundary F1 ----

namespace detail {

inline std::vector<uint8_t> edge_set(const Image& img, double threshold) {
    const ControlImage e = label_edges(img, threshold);
    std::vector<uint8_t> out(static_cast<size_t>(img.h) * img.w);
    for (size_t p = 0; p < out.size(); ++p) out[p] = e.pixels.px[3 * p] > 0 ? 1 : 0;
    return out;
}

// fraction of a's edge pixels with a b-edge within Chebyshev distance tol
inline double matched_fraction(const std::vector<uint8_t>& a, const std::vector<uint8_t>& b, int h, int w, int tol) {
    long total = 0, matched = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!a[static_cast<size_t>(y) * w + x]) continue;
            ++total;
            bool hit = false;
            for (int dy = -tol; dy <= tol && !hit; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= h) continue;
                for (int dx = -tol; dx <= tol; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= w) continue;
                    if (b[static_cast<size_t>(yy) * w + xx]) {
                        hit = true;
                        break;
                    }
                }
            }
            matched += hit ? 1 : 0;
        }
    }
    return total == 0 ? -1.0 : static_cast<double>(matched) / static_cast<double>(total);
}

}  // namespace detail

// Edge-alignment F1 between a control map and an image: Sobel edges of both,
// precision/recall with a Chebyshev match radius, harmonic mean. Two empty
// edge sets score 1 by convention.
inline double boundary_f1(const Image& control, const Image& image, int tolerance_px = 1,
                          double edge_threshold = 0.25) {
    if (control.h != image.h || control.w != image.w) throw std::invalid_argument("boundary_f1: size mismatch");
    const auto ea = detail::edge_set(control, edge_threshold);
    const auto eb = detail::edge_set(image, edge_threshold);
    const double recall = detail::matched_fraction(ea, eb, control.h, control.w, tolerance_px);
    const double precision = detail::matched_fraction(eb, ea, control.h, control.w, tolerance_px);
    if (recall < 0 && precision < 0) return 1.0;  // both empty
    if (recall < 0 || precision < 0) return 0.0;  // one empty
    if (precision + recall == 0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

// ---- token accuracy ----

struct TokenAccuracy {
    double overall = 0;
    std::vector<double> per_scale;
};

inline TokenAccuracy control_token_accuracy(const ScaleTokenMaps& predicted, const ScaleTokenMaps& truth,
                                            const ScaleSchedule& sched) {
    if (predicted.tokens.size() != truth.tokens.size() ||
        static_cast<int>(truth.tokens.size()) != sched.positions()) {
        throw std::invalid_argument("control_token_accuracy: token count mismatch");
    }
    TokenAccuracy acc;
    long hits = 0;
    for (int t = 0; t < sched.count(); ++t) {
        long scale_hits = 0;
        for (int c = 0; c < sched.cells(t); ++c) {
            const size_t at = static_cast<size_t>(sched.offset(t) + c);
            scale_hits += predicted.tokens[at] == truth.tokens[at] ? 1 : 0;
        }
        hits += scale_hits;
        acc.per_scale.push_back(static_cast<double>(scale_hits) / sched.cells(t));
    }
    acc.overall = static_cast<double>(hits) / sched.positions();
    return acc;
}

// ---- random-feature Frechet distance ----

inline constexpr uint64_t kFeatureNetSeed = 190;  // frozen; reports are comparable across runs

// Fixed random three-layer strided convolution net (3x3, stride 2, GELU),
// global-average-pooled to a 64-dim feature. Never trained.
class FeatureNet {
public:
    explicit FeatureNet(uint64_t seed = kFeatureNetSeed) {
        Rng rng(mix64(seed ^ 0xFEA7ull));
        auto fill = [&rng](std::vector<float>& w, int fan_in) {
            const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (auto& v : w) v = static_cast<float>(rng.normal() * s);
        };
        w1_.resize(16 * 3 * 9);
        w2_.resize(32 * 16 * 9);
        w3_.resize(64 * 32 * 9);
        fill(w1_, 3 * 9);
        fill(w2_, 16 * 9);
        fill(w3_, 32 * 9);
    }

    std::vector<double> features(const Image& img) const {
        std::vector<float> x(static_cast<size_t>(img.h) * img.w * 3);
        for (size_t p = 0; p < static_cast<size_t>(img.h) * img.w; ++p) {
            for (int c = 0; c < 3; ++c) {
                x[c * static_cast<size_t>(img.h) * img.w + p] = img.px[3 * p + c] / 255.0f - 0.5f;
            }
        }
        int h = img.h, w = img.w;
        std::vector<float> a = conv(x, 3, 16, h, w, w1_);
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        gelu_inplace(a);
        std::vector<float> b = conv(a, 16, 32, h, w, w2_);
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        gelu_inplace(b);
        std::vector<float> c = conv(b, 32, 64, h, w, w3_);
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        gelu_inplace(c);
        std::vector<double> feat(64, 0.0);
        const size_t plane = static_cast<size_t>(h) * w;
        for (int ch = 0; ch < 64; ++ch) {
            double s = 0;
            for (size_t p = 0; p < plane; ++p) s += c[ch * plane + p];
            feat[static_cast<size_t>(ch)] = s / static_cast<double>(plane);
        }
        return feat;
    }

private:
    // 3x3 stride-2 conv, zero padding 1, channel-major planes
    static std::vector<float> conv_impl(const std::vector<float>& x, int cin, int cout, int h, int w,
                                        const std::vector<float>& wgt) {
        const int oh = (h + 1) / 2, ow = (w + 1) / 2;
        std::vector<float> y(static_cast<size_t>(cout) * oh * ow, 0.0f);
        for (int co = 0; co < cout; ++co) {
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    float acc = 0;
                    for (int ci = 0; ci < cin; ++ci) {
                        const float* k = wgt.data() + (static_cast<size_t>(co) * cin + ci) * 9;
                        for (int ky = 0; ky < 3; ++ky) {
                            const int iy = 2 * oy + ky - 1;
                            if (iy < 0 || iy >= h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int ix = 2 * ox + kx - 1;
                                if (ix < 0 || ix >= w) continue;
                                acc += k[ky * 3 + kx] * x[ci * static_cast<size_t>(h) * w +
                                                          static_cast<size_t>(iy) * w + ix];
                            }
                        }
                    }
                    y[co * static_cast<size_t>(oh) * ow + static_cast<size_t>(oy) * ow + ox] = acc;
                }
            }
        }
        return y;
    }

    std::vector<float> conv(const std::vector<float>& x, int cin, int cout, int h, int w,
                            const std::vector<float>& wgt) const {
        return conv_impl(x, cin, cout, h, w, wgt);
    }

    static void gelu_inplace(std::vector<float>& v) {
        for (auto& x : v) x = 0.5f * x * (1.0f + std::erf(x * 0.7071067811865476f));
    }

    std::vector<float> w1_, w2_, w3_;
};

// Frechet distance between Gaussian fits of the two feature sets, with
// covariance regularization eps*I.
inline double frechet_from_features(const std::vector<std::vector<double>>& fa,
                                    const std::vector<std::vector<double>>& fb, double eps = 1e-6) {
    if (fa.empty() || fb.empty()) throw std::invalid_argument("frechet: empty feature set");
    const int d = static_cast<int>(fa[0].size());
    auto fit = [d, eps](const std::vector<std::vector<double>>& f) {
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
        for (const auto& v : f) mu += Eigen::Map<const Eigen::VectorXd>(v.data(), d);
        mu /= static_cast<double>(f.size());
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
        for (const auto& v : f) {
            const Eigen::VectorXd c = Eigen::Map<const Eigen::VectorXd>(v.data(), d) - mu;
            cov += c * c.transpose();
        }
        cov /= std::max<double>(1.0, static_cast<double>(f.size()) - 1.0);
        cov += eps * Eigen::MatrixXd::Identity(d, d);
        return std::make_pair(mu, cov);
    };
    const auto [mu_a, cov_a] = fit(fa);
    const auto [mu_b, cov_b] = fit(fb);

    auto sqrtm = [](const Eigen::MatrixXd& m) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
        Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
        return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
    };
    const Eigen::MatrixXd root_a = sqrtm(cov_a);
    const Eigen::MatrixXd inner = sqrtm(root_a * cov_b * root_a);
    const double d2 = (mu_a - mu_b).squaredNorm() + (cov_a + cov_b - 2.0 * inner).trace();
    return std::max(0.0, d2);
}

inline double feature_frechet_distance(const std::vector<const Image*>& a, const std::vector<const Image*>& b,
                                       uint64_t seed = kFeatureNetSeed) {
    const FeatureNet net(seed);
    std::vector<std::vector<double>> fa, fb;
    fa.reserve(a.size());
    fb.reserve(b.size());
    for (const Image* img : a) fa.push_back(net.features(*img));
    for (const Image* img : b) fb.push_back(net.features(*img));
    return frechet_from_features(fa, fb);
}

// ---- sweep bookkeeping ----

struct GammaPoint {
    double gamma = 0;
    double mean_f1 = 0;
    double stderr_f1 = 0;
    double ffd = -1;  // negative when not computed
    int n = 0;
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double stderr_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double mu = mean_of(v);
    double acc = 0;
    for (double x : v) acc += (x - mu) * (x - mu);
    return std::sqrt(acc / (static_cast<double>(v.size()) - 1.0) / static_cast<double>(v.size()));
}

// One-sided paired z-statistic for mean(diff) > 0 (n is large enough for the
// normal approximation; p<0.01 corresponds to z > 2.326).
inline double paired_one_sided_z(const std::vector<double>& diffs) {
    const double mu = mean_of(diffs);
    const double se = stderr_of(diffs);
    return se > 0 ? mu / se : (mu > 0 ? 1e9 : 0.0);
}

}  // namespace cvar
