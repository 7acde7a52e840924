#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cvar/image.hpp"
#include "cvar/rng.hpp"
#include "cvar/sha256.hpp"
#include "cvar/tensor.hpp"

namespace cvar {

// Ordered next-scale resolutions; the last scale is the working resolution.
struct ScaleSchedule {
    std::vector<std::pair<int, int>> scales;

    static ScaleSchedule square(const std::vector<int>& sides) {
        ScaleSchedule s;
        for (int v : sides) s.scales.emplace_back(v, v);
        s.validate();
        return s;
    }

    void validate() const {
        if (scales.empty()) throw std::invalid_argument("schedule: empty");
        if (scales.front() != std::pair<int, int>(1, 1)) throw std::invalid_argument("schedule: must start at 1x1");
        long prev = 0;
        for (const auto& [h, w] : scales) {
            if (h < 1 || w < 1) throw std::invalid_argument("schedule: non-positive scale");
            const long area = static_cast<long>(h) * w;
            if (area < prev) throw std::invalid_argument("schedule: areas must be non-decreasing");
            prev = area;
        }
    }

    int count() const { return static_cast<int>(scales.size()); }
    int h(int t) const { return scales[static_cast<size_t>(t)].first; }
    int w(int t) const { return scales[static_cast<size_t>(t)].second; }
    int cells(int t) const { return h(t) * w(t); }
    int full_h() const { return scales.back().first; }
    int full_w() const { return scales.back().second; }

    // flat offset of scale t's grid inside a per-stream token vector
    int offset(int t) const {
        int off = 0;
        for (int u = 0; u < t; ++u) off += cells(u);
        return off;
    }

    int positions() const { return offset(count()); }

    std::vector<int> to_sides() const {
        std::vector<int> out;
        for (const auto& [h, w] : scales) {
            if (h != w) throw std::logic_error("schedule: non-square scale");
            out.push_back(h);
        }
        return out;
    }
};

// Shared quantization vectors in residual-RGB space.
struct Codebook {
    int vocab = 0;
    std::vector<float> vecs;  // vocab * 3
    uint64_t seed = 0;
    int iterations = 0;

    const float* at(int v) const { return vecs.data() + 3 * static_cast<size_t>(v); }

    std::string hash() const {
        Sha256 h;
        const uint32_t v32 = static_cast<uint32_t>(vocab);
        h.update(&v32, sizeof(v32));
        h.update(vecs.data(), vecs.size() * sizeof(float));
        return Sha256::to_hex(h.digest());
    }
};

// Token grids for one stream; grid t occupies [offset(t), offset(t)+cells(t)).
struct ScaleTokenMaps {
    std::vector<int> tokens;
};

// ---- codebook file: magic "CVCB", version u32, V u32, V x 3 f32 LE ----

inline void write_codebook(const std::string& path, const Codebook& cb) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_codebook: cannot open " + path);
    f.write("CVCB", 4);
    const uint32_t version = 1, v = static_cast<uint32_t>(cb.vocab);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.write(reinterpret_cast<const char*>(cb.vecs.data()),
            static_cast<std::streamsize>(cb.vecs.size() * sizeof(float)));
    if (!f) throw std::runtime_error("write_codebook: write failed");
}

inline Codebook read_codebook(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_codebook: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (f.gcount() != 4 || std::memcmp(magic, "CVCB", 4) != 0) {
        throw std::runtime_error("read_codebook: bad magic in " + path);
    }
    uint32_t version = 0, v = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&v), 4);
    if (version != 1) throw std::runtime_error("read_codebook: unsupported version");
    if (v < 2) throw std::runtime_error("read_codebook: vocabulary too small");
    Codebook cb;
    cb.vocab = static_cast<int>(v);
    cb.vecs.resize(3 * static_cast<size_t>(v));
    f.read(reinterpret_cast<char*>(cb.vecs.data()), static_cast<std::streamsize>(cb.vecs.size() * sizeof(float)));
    if (!f) throw std::runtime_error("read_codebook: truncated file");
    return cb;
}

// ---- nearest-code quantization (ties resolve to the lowest index) ----

inline int nearest_code(const Codebook& cb, const float* p) {
    int best = 0;
    float bd = std::numeric_limits<float>::max();
    for (int v = 0; v < cb.vocab; ++v) {
        const float* c = cb.at(v);
        const float d0 = p[0] - c[0], d1 = p[1] - c[1], d2 = p[2] - c[2];
        const float d = d0 * d0 + d1 * d1 + d2 * d2;
        if (d < bd) {
            bd = d;
            best = v;
        }
    }
    return best;
}

// ---- encode / decode / prefix reconstruction ----

namespace detail {

template <typename T>
void check_resolution(const Tensor<T>& plane, const ScaleSchedule& sched) {
    if (plane.shape.size() != 2 || plane.shape[0] != sched.full_h() * sched.full_w() || plane.shape[1] != 3) {
        throw std::invalid_argument("tokenizer: input resolution does not match schedule");
    }
}

}  // namespace detail

// Residual-pyramid encoding: at each scale quantize the bilinearly
// downsampled residual and fold the upsampled quantization back into the
// running reconstruction.
inline ScaleTokenMaps encode(const Tensor<float>& plane, const Codebook& cb, const ScaleSchedule& sched,
                             std::vector<double>* residual_rms = nullptr) {
    detail::check_resolution(plane, sched);
    const int fh = sched.full_h(), fw = sched.full_w();
    ScaleTokenMaps out;
    out.tokens.resize(static_cast<size_t>(sched.positions()));
    Tensor<float> recon({fh * fw, 3});
    Tensor<float> residual({fh * fw, 3});
    if (residual_rms) residual_rms->clear();
    for (int t = 0; t < sched.count(); ++t) {
        for (size_t i = 0; i < residual.data.size(); ++i) residual.data[i] = plane.data[i] - recon.data[i];
        const Tensor<float> down = resample_bilinear(residual, fh, fw, sched.h(t), sched.w(t));
        Tensor<float> quant({sched.cells(t), 3});
        int* tok = out.tokens.data() + sched.offset(t);
        for (int cell = 0; cell < sched.cells(t); ++cell) {
            const int v = nearest_code(cb, down.data.data() + 3 * static_cast<size_t>(cell));
            tok[cell] = v;
            std::memcpy(quant.data.data() + 3 * static_cast<size_t>(cell), cb.at(v), 3 * sizeof(float));
        }
        const Tensor<float> up = resample_bilinear(quant, sched.h(t), sched.w(t), fh, fw);
        for (size_t i = 0; i < recon.data.size(); ++i) recon.data[i] += up.data[i];
        if (residual_rms) {
            double acc = 0;
            for (size_t i = 0; i < recon.data.size(); ++i) {
                const double d = plane.data[i] - recon.data[i];
                acc += d * d;
            }
            residual_rms->push_back(std::sqrt(acc / static_cast<double>(recon.data.size())));
        }
    }
    return out;
}

inline ScaleTokenMaps encode(const Image& img, const Codebook& cb, const ScaleSchedule& sched) {
    return encode(to_float<float>(img), cb, sched);
}

// Unclamped sum of the upsampled quantized grids for scales [0, upto).
inline Tensor<float> accumulate_scales(const ScaleTokenMaps& tokens, const Codebook& cb, const ScaleSchedule& sched,
                                       int upto) {
    const int fh = sched.full_h(), fw = sched.full_w();
    Tensor<float> recon({fh * fw, 3});
    for (int t = 0; t < upto; ++t) {
        Tensor<float> quant({sched.cells(t), 3});
        const int* tok = tokens.tokens.data() + sched.offset(t);
        for (int cell = 0; cell < sched.cells(t); ++cell) {
            const int v = tok[cell];
            if (v < 0 || v >= cb.vocab) throw std::invalid_argument("decode: token out of range");
            std::memcpy(quant.data.data() + 3 * static_cast<size_t>(cell), cb.at(v), 3 * sizeof(float));
        }
        const Tensor<float> up = resample_bilinear(quant, sched.h(t), sched.w(t), fh, fw);
        for (size_t i = 0; i < recon.data.size(); ++i) recon.data[i] += up.data[i];
    }
    return recon;
}

// Continuous reconstruction in [0,1]; equals decode() before 8-bit rounding.
inline Tensor<float> decode_continuous(const ScaleTokenMaps& tokens, const Codebook& cb,
                                       const ScaleSchedule& sched) {
    Tensor<float> recon = accumulate_scales(tokens, cb, sched, sched.count());
    for (float& v : recon.data) v = std::clamp(v, 0.0f, 1.0f);
    return recon;
}

inline Image decode(const ScaleTokenMaps& tokens, const Codebook& cb, const ScaleSchedule& sched) {
    return to_image(decode_continuous(tokens, cb, sched), sched.full_h(), sched.full_w());
}

// Partial reconstruction from scales [0, upto), resampled to scale u's grid
// and clamped; the model's next-scale input features.
inline Tensor<float> reconstruct_prefix(const ScaleTokenMaps& tokens, const Codebook& cb,
                                        const ScaleSchedule& sched, int upto, int u) {
    Tensor<float> recon = accumulate_scales(tokens, cb, sched, upto);
    for (float& v : recon.data) v = std::clamp(v, 0.0f, 1.0f);
    return resample_bilinear(recon, sched.full_h(), sched.full_w(), sched.h(u), sched.w(u));
}

// ---- codebook fitting ----

// Multi-scale residual cells collected with a provisional identity quantizer
// (the recursion with quantization error zero).
inline void collect_residual_vectors(const Tensor<float>& plane, const ScaleSchedule& sched,
                                     std::vector<float>& pool) {
    detail::check_resolution(plane, sched);
    const int fh = sched.full_h(), fw = sched.full_w();
    Tensor<float> recon({fh * fw, 3});
    Tensor<float> residual({fh * fw, 3});
    for (int t = 0; t < sched.count(); ++t) {
        for (size_t i = 0; i < residual.data.size(); ++i) residual.data[i] = plane.data[i] - recon.data[i];
        const Tensor<float> down = resample_bilinear(residual, fh, fw, sched.h(t), sched.w(t));
        pool.insert(pool.end(), down.data.begin(), down.data.end());
        const Tensor<float> up = resample_bilinear(down, sched.h(t), sched.w(t), fh, fw);
        for (size_t i = 0; i < recon.data.size(); ++i) recon.data[i] += up.data[i];
    }
}

// Seeded Lloyd iterations over the pooled residual vectors. Deterministic in
// (pool order, vocab, seed); duplicate centroids are re-seeded onto the
// pooled point farthest from the current set so the codebook never carries
// duplicate vectors.
inline Codebook fit_codebook_from_pool(std::vector<float> pool, int vocab, uint64_t seed, int iterations = 25,
                                       size_t sample_cap = 131072) {
    if (vocab < 2) throw std::invalid_argument("fit_codebook: V must be >= 2");
    size_t n = pool.size() / 3;
    if (n == 0) throw std::invalid_argument("fit_codebook: empty pool");
    Rng rng(mix64(seed ^ 0xC0DEB00Cull));
    if (n > sample_cap) {
        std::vector<float> sub;
        sub.reserve(sample_cap * 3);
        for (size_t i = 0; i < sample_cap; ++i) {
            const size_t j = rng.below(n);
            sub.insert(sub.end(), pool.begin() + 3 * j, pool.begin() + 3 * j + 3);
        }
        pool = std::move(sub);
        n = sample_cap;
    }

    using MatX = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const MatX> pts(pool.data(), static_cast<Eigen::Index>(n), 3);

    Codebook cb;
    cb.vocab = vocab;
    cb.seed = seed;
    cb.iterations = iterations;
    cb.vecs.resize(3 * static_cast<size_t>(vocab));
    MatX centers(vocab, 3);
    for (int v = 0; v < vocab; ++v) centers.row(v) = pts.row(static_cast<Eigen::Index>(rng.below(n)));

    std::vector<int> assign(n, 0);
    const size_t chunk = 8192;
    MatX d2;
    for (int it = 0; it < iterations; ++it) {
        const Eigen::VectorXf cnorm = centers.rowwise().squaredNorm();
        for (size_t base = 0; base < n; base += chunk) {
            const Eigen::Index rows = static_cast<Eigen::Index>(std::min(chunk, n - base));
            d2.resize(rows, vocab);
            d2.noalias() = pts.middleRows(static_cast<Eigen::Index>(base), rows) * centers.transpose() * -2.0f;
            d2.rowwise() += cnorm.transpose();
            for (Eigen::Index r = 0; r < rows; ++r) {
                Eigen::Index best;
                d2.row(r).minCoeff(&best);
                assign[base + static_cast<size_t>(r)] = static_cast<int>(best);
            }
        }
        MatX sums = MatX::Zero(vocab, 3);
        std::vector<long> counts(static_cast<size_t>(vocab), 0);
        for (size_t i = 0; i < n; ++i) {
            sums.row(assign[i]) += pts.row(static_cast<Eigen::Index>(i));
            counts[static_cast<size_t>(assign[i])]++;
        }
        for (int v = 0; v < vocab; ++v) {
            if (counts[static_cast<size_t>(v)] > 0) {
                centers.row(v) = sums.row(v) / static_cast<float>(counts[static_cast<size_t>(v)]);
            }
        }
    }

    // resolve exact duplicates deterministically
    for (int v = 1; v < vocab; ++v) {
        bool dup = false;
        do {
            dup = false;
            for (int u = 0; u < v; ++u) {
                if (centers.row(u) == centers.row(v)) {
                    dup = true;
                    break;
                }
            }
            if (dup) {
                Eigen::Index far = 0;
                float best = -1;
                for (Eigen::Index i = 0; i < pts.rows(); ++i) {
                    float dmin = std::numeric_limits<float>::max();
                    for (int u = 0; u <= v; ++u) dmin = std::min(dmin, (pts.row(i) - centers.row(u)).squaredNorm());
                    if (dmin > best) {
                        best = dmin;
                        far = i;
                    }
                }
                if (best <= 0) {
                    // degenerate pool; nudge instead
                    centers(v, 0) += 1e-6f * static_cast<float>(v);
                    break;
                }
                centers.row(v) = pts.row(far);
            }
        } while (dup);
    }

    for (int v = 0; v < vocab; ++v) {
        cb.vecs[3 * static_cast<size_t>(v)] = centers(v, 0);
        cb.vecs[3 * static_cast<size_t>(v) + 1] = centers(v, 1);
        cb.vecs[3 * static_cast<size_t>(v) + 2] = centers(v, 2);
    }
    return cb;
}

inline Codebook fit_codebook(const std::vector<Tensor<float>>& planes, const ScaleSchedule& sched, int vocab,
                             uint64_t seed, int iterations = 25, size_t sample_cap = 131072) {
    std::vector<float> pool;
    for (const auto& p : planes) collect_residual_vectors(p, sched, pool);
    return fit_codebook_from_pool(std::move(pool), vocab, seed, iterations, sample_cap);
}

// ---- round-trip quality ----

inline double psnr(const Image& a, const Image& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("psnr: size mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.px.size(); ++i) {
        const double d = (static_cast<double>(a.px[i]) - b.px[i]) / 255.0;
        mse += d * d;
    }
    mse /= static_cast<double>(a.px.size());
    if (mse <= 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace cvar
