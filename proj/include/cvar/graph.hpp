#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cvar/tensor.hpp"

namespace cvar {

// One contiguous run of query rows sharing an attention span [0, attend_end).
// Block-causal layouts are unions of such runs; full attention is a single
// run with attend_end == seq_len.
struct AttnBlock {
    int row_begin = 0;
    int row_end = 0;
    int attend_end = 0;
};

// Reverse-mode tape over Tensor<T>. Nodes are created in topological order,
// so walking the tape backwards visits each node exactly once. Values and
// gradients of interior nodes are released as soon as backward has consumed
// them; parameter gradients survive until the graph is destroyed.
template <typename T>
class Graph {
public:
    using Var = int;
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Map = Eigen::Map<Mat>;
    using CMap = Eigen::Map<const Mat>;
    using StrideMap = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    using CStrideMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;

    explicit Graph(bool record = true) : record_(record) {}

    bool recording() const { return record_; }

    // ---- leaves ----

    Var input(Tensor<T> v) {
        nodes_.push_back(Node{});
        Node& n = nodes_.back();
        n.owned = std::move(v);
        n.external = nullptr;
        n.needs_grad = false;
        return static_cast<Var>(nodes_.size() - 1);
    }

    // External storage leaf; gradients are tracked when recording.
    Var param(const Tensor<T>* p) {
        nodes_.push_back(Node{});
        Node& n = nodes_.back();
        n.external = p;
        n.needs_grad = record_;
        n.is_param = true;
        return static_cast<Var>(nodes_.size() - 1);
    }

    const Tensor<T>& value(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v)];
        return n.external ? *n.external : n.owned;
    }

    const Tensor<T>& grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v)];
        if (n.grad.numel() == 0) throw std::logic_error("Graph::grad: no gradient stored");
        return n.grad;
    }

    // ---- elementwise / broadcast ----

    Var add(Var a, Var b) {
        const Tensor<T>&va = value(a), &vb = value(b);
        require(va.same_shape(vb), "add: shape mismatch " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
        Tensor<T> out = va;
        vec(out) += cvec(vb);
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            g.accumulate(a, g.nodes_[self].grad);
            g.accumulate(b, g.nodes_[self].grad);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor<T>&va = value(a), &vb = value(b);
        require(va.same_shape(vb), "mul: shape mismatch");
        Tensor<T> out = va;
        vec(out).array() *= cvec(vb).array();
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            if (g.wants(a)) {
                Tensor<T> da = go;
                vec(da).array() *= cvec(g.value(b)).array();
                g.accumulate(a, da);
            }
            if (g.wants(b)) {
                Tensor<T> db = go;
                vec(db).array() *= cvec(g.value(a)).array();
                g.accumulate(b, db);
            }
        });
    }

    Var scale(Var x, T s) {
        Tensor<T> out = value(x);
        vec(out) *= s;
        return make(std::move(out), {x}, [x, s](Graph& g, int self) {
            Tensor<T> dx = g.nodes_[self].grad;
            vec(dx) *= s;
            g.accumulate(x, dx);
        });
    }

    Var add_const(Var x, T c) {
        Tensor<T> out = value(x);
        vec(out).array() += c;
        return make(std::move(out), {x}, [x](Graph& g, int self) {
            g.accumulate(x, g.nodes_[self].grad);
        });
    }

    // x: [m, n], v: [1, n] broadcast over rows.
    Var add_rowvec(Var x, Var v) {
        const Tensor<T>&vx = value(x), &vv = value(v);
        require(vx.shape.size() == 2 && vv.shape.size() == 2 && vv.shape[0] == 1 && vv.shape[1] == vx.shape[1],
                "add_rowvec: want [m,n] + [1,n]");
        Tensor<T> out = vx;
        cmat(out).rowwise() += crow(vv);
        return make(std::move(out), {x, v}, [x, v](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            g.accumulate(x, go);
            if (g.wants(v)) {
                Tensor<T> dv({1, go.shape[1]});
                crowsum(go, dv);
                g.accumulate(v, dv);
            }
        });
    }

    Var mul_rowvec(Var x, Var v) {
        const Tensor<T>&vx = value(x), &vv = value(v);
        require(vx.shape.size() == 2 && vv.shape.size() == 2 && vv.shape[0] == 1 && vv.shape[1] == vx.shape[1],
                "mul_rowvec: want [m,n] * [1,n]");
        Tensor<T> out = vx;
        cmat(out).array().rowwise() *= crow(vv).array();
        return make(std::move(out), {x, v}, [x, v](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            if (g.wants(x)) {
                Tensor<T> dx = go;
                cmat(dx).array().rowwise() *= crow(g.value(v)).array();
                g.accumulate(x, dx);
            }
            if (g.wants(v)) {
                Tensor<T> prod = go;
                vec(prod).array() *= cvec(g.value(x)).array();
                Tensor<T> dv({1, go.shape[1]});
                crowsum(prod, dv);
                g.accumulate(v, dv);
            }
        });
    }

    // ---- matmul / layout ----

    Var matmul(Var a, Var b) {
        const Tensor<T>&va = value(a), &vb = value(b);
        require(va.shape.size() == 2 && vb.shape.size() == 2 && va.shape[1] == vb.shape[0],
                "matmul: incompatible " + shape_str(va.shape) + " x " + shape_str(vb.shape));
        Tensor<T> out({va.shape[0], vb.shape[1]});
        mat(out).noalias() = cmat2(va) * cmat2(vb);
        return make(std::move(out), {a, b}, [a, b](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            if (g.wants(a)) {
                Tensor<T> da(g.value(a).shape);
                mat(da).noalias() = cmat2(go) * cmat2(g.value(b)).transpose();
                g.accumulate(a, da);
            }
            if (g.wants(b)) {
                Tensor<T> db(g.value(b).shape);
                mat(db).noalias() = cmat2(g.value(a)).transpose() * cmat2(go);
                g.accumulate(b, db);
            }
        });
    }

    Var transpose(Var x) {
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2, "transpose: want matrix");
        Tensor<T> out({vx.shape[1], vx.shape[0]});
        mat(out) = cmat2(vx).transpose();
        return make(std::move(out), {x}, [x](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T> dx(g.value(x).shape);
            mat(dx) = cmat2(go).transpose();
            g.accumulate(x, dx);
        });
    }

    Var slice_rows(Var x, int r0, int r1) {
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2 && 0 <= r0 && r0 <= r1 && r1 <= vx.shape[0], "slice_rows: bad range");
        const int n = vx.shape[1];
        Tensor<T> out({r1 - r0, n});
        std::copy(vx.data.begin() + static_cast<size_t>(r0) * n, vx.data.begin() + static_cast<size_t>(r1) * n,
                  out.data.begin());
        return make(std::move(out), {x}, [x, r0](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T>& dst = g.ensure_grad(x);
            const int n2 = go.shape[1];
            for (size_t i = 0; i < go.data.size(); ++i) {
                dst.data[static_cast<size_t>(r0) * n2 + i] += go.data[i];
            }
        });
    }

    Var slice_cols(Var x, int c0, int c1) {
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2 && 0 <= c0 && c0 <= c1 && c1 <= vx.shape[1], "slice_cols: bad range");
        Tensor<T> out({vx.shape[0], c1 - c0});
        mat(out) = cmat2(vx).middleCols(c0, c1 - c0);
        return make(std::move(out), {x}, [x, c0](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T>& dst = g.ensure_grad(x);
            mat(dst).middleCols(c0, go.shape[1]) += cmat2(go);
        });
    }

    Var concat_rows(const std::vector<Var>& parts) {
        require(!parts.empty(), "concat_rows: empty");
        const int n = value(parts[0]).shape[1];
        int rows = 0;
        for (Var p : parts) {
            const Tensor<T>& v = value(p);
            require(v.shape.size() == 2 && v.shape[1] == n, "concat_rows: column mismatch");
            rows += v.shape[0];
        }
        Tensor<T> out({rows, n});
        size_t off = 0;
        for (Var p : parts) {
            const Tensor<T>& v = value(p);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
            off += v.data.size();
        }
        return make(std::move(out), parts, [parts](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            size_t off2 = 0;
            for (Var p : parts) {
                const size_t cnt = g.value(p).numel();
                if (g.wants(p)) {
                    Tensor<T>& dst = g.ensure_grad(p);
                    for (size_t i = 0; i < cnt; ++i) dst.data[i] += go.data[off2 + i];
                }
                off2 += cnt;
            }
        });
    }

    // out[i, :] = table[idx[i], :]; duplicate indices accumulate in backward.
    Var gather_rows(Var table, std::vector<int> idx) {
        const Tensor<T>& vt = value(table);
        require(vt.shape.size() == 2, "gather_rows: want matrix table");
        const int n = vt.shape[1];
        for (int i : idx) require(0 <= i && i < vt.shape[0], "gather_rows: index out of range");
        Tensor<T> out({static_cast<int>(idx.size()), n});
        for (size_t r = 0; r < idx.size(); ++r) {
            std::copy(vt.data.begin() + static_cast<size_t>(idx[r]) * n,
                      vt.data.begin() + static_cast<size_t>(idx[r] + 1) * n,
                      out.data.begin() + r * n);
        }
        return make(std::move(out), {table}, [table, idx = std::move(idx)](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T>& dst = g.ensure_grad(table);
            const int n2 = go.shape[1];
            for (size_t r = 0; r < idx.size(); ++r) {
                T* drow = dst.data.data() + static_cast<size_t>(idx[r]) * n2;
                const T* srow = go.data.data() + r * n2;
                for (int c = 0; c < n2; ++c) drow[c] += srow[c];
            }
        });
    }

    // ---- nonlinearities / normalization ----

    Var gelu(Var x) {
        const Tensor<T>& vx = value(x);
        Tensor<T> out = vx;
        for (T& v : out.data) v = gelu_fwd(v);
        return make(std::move(out), {x}, [x](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& vin = g.value(x);
            Tensor<T> dx(vin.shape);
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = go.data[i] * gelu_bwd(vin.data[i]);
            g.accumulate(x, dx);
        });
    }

    // Per-row normalization without learned affine; adaptive scale/shift are
    // applied by the caller through mul_rowvec/add_rowvec.
    Var layernorm_rows(Var x, T eps = T(1e-5)) {
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2, "layernorm_rows: want matrix");
        const int m = vx.shape[0], n = vx.shape[1];
        Tensor<T> out(vx.shape);
        std::vector<T> rstd(static_cast<size_t>(m));
        for (int r = 0; r < m; ++r) {
            const T* xr = vx.data.data() + static_cast<size_t>(r) * n;
            T mu = 0;
            for (int c = 0; c < n; ++c) mu += xr[c];
            mu /= static_cast<T>(n);
            T var = 0;
            for (int c = 0; c < n; ++c) {
                const T d = xr[c] - mu;
                var += d * d;
            }
            var /= static_cast<T>(n);
            const T rs = T(1) / std::sqrt(var + eps);
            rstd[static_cast<size_t>(r)] = rs;
            T* yr = out.data.data() + static_cast<size_t>(r) * n;
            for (int c = 0; c < n; ++c) yr[c] = (xr[c] - mu) * rs;
        }
        return make(std::move(out), {x}, [x, rstd = std::move(rstd)](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& y = g.node_value(self);
            const int m2 = go.shape[0], n2 = go.shape[1];
            Tensor<T> dx(go.shape);
            for (int r = 0; r < m2; ++r) {
                const T* gr = go.data.data() + static_cast<size_t>(r) * n2;
                const T* yr = y.data.data() + static_cast<size_t>(r) * n2;
                T mean_g = 0, mean_gy = 0;
                for (int c = 0; c < n2; ++c) {
                    mean_g += gr[c];
                    mean_gy += gr[c] * yr[c];
                }
                mean_g /= static_cast<T>(n2);
                mean_gy /= static_cast<T>(n2);
                T* dr = dx.data.data() + static_cast<size_t>(r) * n2;
                const T rs = rstd[static_cast<size_t>(r)];
                for (int c = 0; c < n2; ++c) dr[c] = rs * (gr[c] - mean_g - yr[c] * mean_gy);
            }
            g.accumulate(x, dx);
        });
    }

    // Softmax along the last axis (axis=1) or axis 0 via transpose.
    Var softmax(Var x, int axis = 1) {
        if (axis == 0) return transpose(softmax(transpose(x), 1));
        require(axis == 1, "softmax: axis must be 0 or 1");
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2, "softmax: want matrix");
        require(vx.all_finite(), "softmax: non-finite input");
        const int m = vx.shape[0], n = vx.shape[1];
        std::vector<int> limits(static_cast<size_t>(m), n);
        return masked_softmax_rows(x, limits);
    }

    // Softmax per row over columns [0, limits[r]); remaining columns are 0.
    Var masked_softmax_rows(Var x, const std::vector<int>& limits) {
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2, "masked_softmax_rows: want matrix");
        const int m = vx.shape[0], n = vx.shape[1];
        require(static_cast<int>(limits.size()) == m, "masked_softmax_rows: limits size");
        Tensor<T> out({m, n});
        for (int r = 0; r < m; ++r) {
            const int lim = limits[static_cast<size_t>(r)];
            require(lim >= 1 && lim <= n, "masked_softmax_rows: bad limit");
            softmax_row(vx.data.data() + static_cast<size_t>(r) * n, out.data.data() + static_cast<size_t>(r) * n,
                        lim);
        }
        return make(std::move(out), {x}, [x, limits](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            const Tensor<T>& y = g.node_value(self);
            const int m2 = go.shape[0], n2 = go.shape[1];
            Tensor<T> dx({m2, n2});
            for (int r = 0; r < m2; ++r) {
                const int lim = limits[static_cast<size_t>(r)];
                const T* gr = go.data.data() + static_cast<size_t>(r) * n2;
                const T* yr = y.data.data() + static_cast<size_t>(r) * n2;
                T dot = 0;
                for (int c = 0; c < lim; ++c) dot += gr[c] * yr[c];
                T* dr = dx.data.data() + static_cast<size_t>(r) * n2;
                for (int c = 0; c < lim; ++c) dr[c] = yr[c] * (gr[c] - dot);
            }
            g.accumulate(x, dx);
        });
    }

    // Mean negative log-likelihood with the log-softmax folded in; stable for
    // logits up to +-1e4. Result is a [1,1] scalar.
    Var cross_entropy_mean(Var logits, const std::vector<int>& targets) {
        const Tensor<T>& vl = value(logits);
        require(vl.shape.size() == 2, "cross_entropy_mean: want [P,V] logits");
        require(vl.all_finite(), "cross_entropy_mean: non-finite logits");
        const int p = vl.shape[0], vsz = vl.shape[1];
        require(static_cast<int>(targets.size()) == p, "cross_entropy_mean: target count mismatch");
        for (int t : targets) require(0 <= t && t < vsz, "cross_entropy_mean: target out of range");
        T loss = 0;
        for (int r = 0; r < p; ++r) {
            const T* zr = vl.data.data() + static_cast<size_t>(r) * vsz;
            T mx = zr[0];
            for (int c = 1; c < vsz; ++c) mx = std::max(mx, zr[c]);
            T se = 0;
            for (int c = 0; c < vsz; ++c) se += std::exp(zr[c] - mx);
            loss += (mx + std::log(se)) - zr[targets[static_cast<size_t>(r)]];
        }
        loss /= static_cast<T>(p);
        Tensor<T> out({1, 1}, {loss});
        return make(std::move(out), {logits}, [logits, targets](Graph& g, int self) {
            const T gscale = g.nodes_[self].grad.data[0];
            const Tensor<T>& vl2 = g.value(logits);
            const int p2 = vl2.shape[0], v2 = vl2.shape[1];
            Tensor<T> dl({p2, v2});
            const T inv_p = T(1) / static_cast<T>(p2);
            for (int r = 0; r < p2; ++r) {
                const T* zr = vl2.data.data() + static_cast<size_t>(r) * v2;
                T* dr = dl.data.data() + static_cast<size_t>(r) * v2;
                softmax_row(zr, dr, v2);
                dr[targets[static_cast<size_t>(r)]] -= T(1);
                for (int c = 0; c < v2; ++c) dr[c] *= gscale * inv_p;
            }
            g.accumulate(logits, dl);
        });
    }

    Var sum(Var x) {
        const Tensor<T>& vx = value(x);
        T s = 0;
        for (const T& v : vx.data) s += v;
        Tensor<T> out({1, 1}, {s});
        return make(std::move(out), {x}, [x](Graph& g, int self) {
            const T gs = g.nodes_[self].grad.data[0];
            Tensor<T> dx(g.value(x).shape);
            std::fill(dx.data.begin(), dx.data.end(), gs);
            g.accumulate(x, dx);
        });
    }

    Var mean(Var x) {
        const Tensor<T>& vx = value(x);
        return scale(sum(x), T(1) / static_cast<T>(vx.numel()));
    }

    // ---- bilinear resampling (fixed weights, align-corners-false, edge clamp) ----
    //
    // x holds an h_in x w_in image with c channels laid out as [h_in*w_in, c].
    Var bilinear_resize(Var x, int h_in, int w_in, int h_out, int w_out) {
        const Tensor<T>& vx = value(x);
        require(vx.shape.size() == 2 && vx.shape[0] == h_in * w_in, "bilinear_resize: bad input shape");
        const int c = vx.shape[1];
        const auto taps = bilinear_taps(h_in, w_in, h_out, w_out);
        Tensor<T> out({h_out * w_out, c});
        for (size_t o = 0; o < taps.size(); ++o) {
            T* yr = out.data.data() + o * c;
            for (const auto& [idx, w] : taps[o]) {
                const T* xr = vx.data.data() + static_cast<size_t>(idx) * c;
                const T wt = static_cast<T>(w);
                for (int ch = 0; ch < c; ++ch) yr[ch] += wt * xr[ch];
            }
        }
        return make(std::move(out), {x}, [x, taps](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T>& dst = g.ensure_grad(x);
            const int c2 = go.shape[1];
            for (size_t o = 0; o < taps.size(); ++o) {
                const T* gr = go.data.data() + o * c2;
                for (const auto& [idx, w] : taps[o]) {
                    T* dr = dst.data.data() + static_cast<size_t>(idx) * c2;
                    const T wt = static_cast<T>(w);
                    for (int ch = 0; ch < c2; ++ch) dr[ch] += wt * gr[ch];
                }
            }
        });
    }

    // Source taps (flat index, weight) per output pixel. Align-corners-false
    // with edge clamping; when downscaling, the triangle kernel widens with
    // the scale factor (antialiased bilinear, the PIL convention), which for
    // upscaling reduces to the usual 4-tap interpolation. Point-sampled
    // downscaling is not an option here: a 1x1 or 2x2 grid sampled from four
    // pixels is unrepresentative enough to break the coarse-to-fine
    // refinement the pyramid relies on.
    static std::vector<std::vector<std::pair<int, double>>> bilinear_taps(int h_in, int w_in, int h_out, int w_out) {
        auto axis_taps = [](int in, int out, int o) {
            const double factor = static_cast<double>(in) / out;
            const double center = (o + 0.5) * factor - 0.5;
            std::vector<std::pair<int, double>> taps;
            if (factor <= 1.0) {
                const double f = std::floor(center);
                const int i0 = static_cast<int>(f);
                const double a = center - f;
                taps.emplace_back(std::clamp(i0, 0, in - 1), 1.0 - a);
                taps.emplace_back(std::clamp(i0 + 1, 0, in - 1), a);
            } else {
                const int lo = static_cast<int>(std::ceil(center - factor));
                const int hi = static_cast<int>(std::floor(center + factor));
                double norm = 0;
                for (int i = lo; i <= hi; ++i) {
                    const double w = 1.0 - std::fabs(i - center) / factor;
                    if (w <= 0) continue;
                    taps.emplace_back(std::clamp(i, 0, in - 1), w);
                    norm += w;
                }
                for (auto& [idx, w] : taps) w /= norm;
            }
            return taps;
        };
        std::vector<std::vector<std::pair<int, double>>> ytaps(static_cast<size_t>(h_out));
        for (int oy = 0; oy < h_out; ++oy) ytaps[static_cast<size_t>(oy)] = axis_taps(h_in, h_out, oy);
        std::vector<std::vector<std::pair<int, double>>> xtaps(static_cast<size_t>(w_out));
        for (int ox = 0; ox < w_out; ++ox) xtaps[static_cast<size_t>(ox)] = axis_taps(w_in, w_out, ox);

        std::vector<std::vector<std::pair<int, double>>> taps(static_cast<size_t>(h_out) * w_out);
        for (int oy = 0; oy < h_out; ++oy) {
            for (int ox = 0; ox < w_out; ++ox) {
                auto& t = taps[static_cast<size_t>(oy) * w_out + ox];
                for (const auto& [y, wy] : ytaps[static_cast<size_t>(oy)]) {
                    for (const auto& [x, wx] : xtaps[static_cast<size_t>(ox)]) {
                        t.emplace_back(y * w_in + x, wy * wx);
                    }
                }
            }
        }
        return taps;
    }

    // ---- fused block-causal multi-head attention ----
    //
    // q, k, v: [S, W] with W = heads * head_dim. Per head the slices are
    // packed into contiguous panels (Eigen's GEMM is an order of magnitude
    // slower on thin strided maps) and K is pre-transposed. Scores and
    // probabilities are recomputed per (head, block) in backward instead of
    // being stored; materialized [S, S] activations would not fit in memory
    // at the default sequence length.
    Var attention(Var q, Var k, Var v, int heads, const std::vector<AttnBlock>& blocks) {
        const Tensor<T>&vq = value(q), &vk = value(k), &vv = value(v);
        require(vq.shape.size() == 2 && vq.same_shape(vk) && vq.same_shape(vv), "attention: q/k/v shape mismatch");
        const int s = vq.shape[0], w = vq.shape[1];
        require(heads >= 1 && w % heads == 0, "attention: width not divisible by heads");
        validate_blocks(blocks, s);
        const int dh = w / heads;
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
        Tensor<T> out({s, w});
        Mat qc(s, dh), kt(dh, s), vc(s, dh), oc(s, dh), scores;
        for (int h = 0; h < heads; ++h) {
            qc = head_view(vq, h, dh, s, w);
            kt = head_view(vk, h, dh, s, w).transpose();
            vc = head_view(vv, h, dh, s, w);
            for (const AttnBlock& b : blocks) {
                const int rows = b.row_end - b.row_begin, keys = b.attend_end;
                scores.resize(rows, keys);
                scores.noalias() = qc.middleRows(b.row_begin, rows) * kt.leftCols(keys) * inv_sqrt;
                softmax_rows_inplace(scores);
                oc.middleRows(b.row_begin, rows).noalias() = scores * vc.topRows(keys);
            }
            head_view_mut(out, h, dh, s, w) = oc;
        }
        return make(std::move(out), {q, k, v},
                    [q, k, v, heads, blocks, dh, inv_sqrt](Graph& g, int self) {
                        const Tensor<T>& go = g.nodes_[self].grad;
                        const Tensor<T>&vq2 = g.value(q), &vk2 = g.value(k), &vv2 = g.value(v);
                        const int s2 = vq2.shape[0], w2 = vq2.shape[1];
                        Tensor<T> dq(vq2.shape), dk(vk2.shape), dv(vv2.shape);
                        Mat qc(s2, dh), kc(s2, dh), kt(dh, s2), vc(s2, dh), goc(s2, dh);
                        Mat dqc(s2, dh), dkc(s2, dh), dvc(s2, dh);
                        Mat probs, dprobs;
                        for (int h = 0; h < heads; ++h) {
                            qc = head_view(vq2, h, dh, s2, w2);
                            kc = head_view(vk2, h, dh, s2, w2);
                            kt = kc.transpose();
                            vc = head_view(vv2, h, dh, s2, w2);
                            goc = head_view(go, h, dh, s2, w2);
                            dqc.setZero();
                            dkc.setZero();
                            dvc.setZero();
                            for (const AttnBlock& b : blocks) {
                                const int rows = b.row_end - b.row_begin, keys = b.attend_end;
                                probs.resize(rows, keys);
                                probs.noalias() = qc.middleRows(b.row_begin, rows) * kt.leftCols(keys) * inv_sqrt;
                                softmax_rows_inplace(probs);
                                dvc.topRows(keys).noalias() += probs.transpose() * goc.middleRows(b.row_begin, rows);
                                dprobs.resize(rows, keys);
                                dprobs.noalias() = goc.middleRows(b.row_begin, rows) * vc.topRows(keys).transpose();
                                // d(softmax): p .* (dp - rowsum(dp .* p))
                                for (int r = 0; r < rows; ++r) {
                                    const T dot = probs.row(r).dot(dprobs.row(r));
                                    dprobs.row(r) = (probs.row(r).array() * (dprobs.row(r).array() - dot)).matrix();
                                }
                                dqc.middleRows(b.row_begin, rows).noalias() += dprobs * kc.topRows(keys) * inv_sqrt;
                                dkc.topRows(keys).noalias() +=
                                    dprobs.transpose() * qc.middleRows(b.row_begin, rows) * inv_sqrt;
                            }
                            head_view_mut(dq, h, dh, s2, w2) = dqc;
                            head_view_mut(dk, h, dh, s2, w2) = dkc;
                            head_view_mut(dv, h, dh, s2, w2) = dvc;
                        }
                        g.accumulate(q, dq);
                        g.accumulate(k, dk);
                        g.accumulate(v, dv);
                    });
    }

    // ---- backward ----

    void backward(Var loss) {
        require(record_, "backward: graph was built in inference mode");
        const Tensor<T>& lv = value(loss);
        require(lv.numel() == 1, "backward: loss must be scalar");
        Tensor<T>& lg = ensure_grad(loss);
        lg.data[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.bwd && n.grad.numel() != 0) n.bwd(*this, i);
            if (!n.is_param) {
                // consumers are all behind us; release interior storage
                if (n.bwd) n.owned = Tensor<T>();
                n.grad = Tensor<T>();
            }
        }
        // untouched parameters report exact zeros
        for (Node& n : nodes_) {
            if (n.is_param && n.grad.numel() == 0) n.grad = Tensor<T>(n.external->shape);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        bool needs_grad = false;
        bool is_param = false;
        std::function<void(Graph&, int)> bwd;
    };

    const Tensor<T>& node_value(int i) const {
        const Node& n = nodes_[static_cast<size_t>(i)];
        return n.external ? *n.external : n.owned;
    }

    bool wants(Var v) const { return nodes_[static_cast<size_t>(v)].needs_grad; }

    Tensor<T>& ensure_grad(Var v) {
        Node& n = nodes_[static_cast<size_t>(v)];
        if (n.grad.numel() == 0) n.grad = Tensor<T>(n.external ? n.external->shape : n.owned.shape);
        return n.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        if (!wants(v)) return;
        Tensor<T>& dst = ensure_grad(v);
        vec(dst) += cvec(g);
    }

    template <typename Fn>
    Var make(Tensor<T> out, const std::vector<Var>& parents, Fn&& bwd) {
        bool ng = false;
        if (record_) {
            for (Var p : parents) ng = ng || nodes_[static_cast<size_t>(p)].needs_grad;
        }
        nodes_.push_back(Node{});
        Node& n = nodes_.back();
        n.owned = std::move(out);
        n.needs_grad = ng;
        if (ng) n.bwd = std::forward<Fn>(bwd);
        return static_cast<Var>(nodes_.size() - 1);
    }

    static void require(bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument("graph: " + msg);
    }

    static void validate_blocks(const std::vector<AttnBlock>& blocks, int s) {
        int expect = 0;
        for (const AttnBlock& b : blocks) {
            require(b.row_begin == expect && b.row_end > b.row_begin, "attention: blocks must tile rows in order");
            require(b.attend_end >= b.row_end && b.attend_end <= s, "attention: bad attend_end");
            expect = b.row_end;
        }
        require(expect == s, "attention: blocks do not cover all rows");
    }

    static T gelu_fwd(T x) {
        return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
    }
    static T gelu_bwd(T x) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
        const T pdf = std::exp(T(-0.5) * x * x) * T(0.3989422804014327);
        return cdf + x * pdf;
    }

    static void softmax_row(const T* z, T* y, int n) {
        T mx = z[0];
        for (int c = 1; c < n; ++c) mx = std::max(mx, z[c]);
        T se = 0;
        for (int c = 0; c < n; ++c) {
            y[c] = std::exp(z[c] - mx);
            se += y[c];
        }
        const T inv = T(1) / se;
        for (int c = 0; c < n; ++c) y[c] *= inv;
    }

    static void softmax_rows_inplace(Mat& m) {
        for (int r = 0; r < m.rows(); ++r) {
            const T mx = m.row(r).maxCoeff();
            m.row(r) = (m.row(r).array() - mx).exp();
            m.row(r) /= m.row(r).sum();
        }
    }

    // Eigen views over tensor storage.
    static Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> vec(Tensor<T>& t) {
        return {t.data.data(), static_cast<Eigen::Index>(t.data.size())};
    }
    static Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> cvec(const Tensor<T>& t) {
        return {t.data.data(), static_cast<Eigen::Index>(t.data.size())};
    }
    static Map mat(Tensor<T>& t) { return {t.data.data(), t.shape[0], t.shape[1]}; }
    static Map cmat(Tensor<T>& t) { return {t.data.data(), t.shape[0], t.shape[1]}; }
    static CMap cmat2(const Tensor<T>& t) { return {t.data.data(), t.shape[0], t.shape[1]}; }
    static Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> crow(const Tensor<T>& t) {
        return {t.data.data(), t.shape[1]};
    }
    static void crowsum(const Tensor<T>& src, Tensor<T>& dst1xn) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> d(dst1xn.data.data(), dst1xn.shape[1]);
        d = cmat2(src).colwise().sum();
    }

    bool record_;
    std::vector<Node> nodes_;
};

}  // namespace cvar
