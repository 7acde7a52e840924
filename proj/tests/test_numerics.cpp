#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "cvar/graph.hpp"
#include "cvar/image.hpp"
#include "cvar/rng.hpp"
#include "cvar/tensor.hpp"

using cvar::Graph;
using cvar::Rng;
using cvar::Tensor;

namespace {

Tensor<float> random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Tensor<float> t(std::move(shape));
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("softmax matches closed-form values") {
    Graph<float> g(false);
    auto x = g.input(Tensor<float>::row({1.0f, 2.0f, 3.0f}));
    auto y = g.softmax(x);
    const auto& v = g.value(y).data;
    // independent oracle: e^z / sum(e^z) evaluated in double
    const double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
    const double s = e1 + e2 + e3;
    CHECK(v[0] == Catch::Approx(e1 / s).epsilon(1e-6));
    CHECK(v[1] == Catch::Approx(e2 / s).epsilon(1e-6));
    CHECK(v[2] == Catch::Approx(e3 / s).epsilon(1e-6));
    CHECK(v[0] == Catch::Approx(0.09003057).margin(1e-7));
    CHECK(v[1] == Catch::Approx(0.24472847).margin(1e-7));
    CHECK(v[2] == Catch::Approx(0.66524096).margin(1e-7));
}

TEST_CASE("softmax symmetry and saturation") {
    Graph<float> g(false);
    auto flat = g.softmax(g.input(Tensor<float>::row({0, 0, 0, 0})));
    for (float p : g.value(flat).data) CHECK(p == Catch::Approx(0.25).margin(1e-7));

    auto sat = g.softmax(g.input(Tensor<float>::row({1000.0f, 0.0f})));
    CHECK(g.value(sat).data[0] == Catch::Approx(1.0).margin(1e-6));
    CHECK(g.value(sat).data[1] == Catch::Approx(0.0).margin(1e-6));
    CHECK(g.value(sat).all_finite());
}

TEST_CASE("softmax is shift invariant and sums to one") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + rng.below_int(30);
        Graph<float> g(false);
        auto x = random_tensor({3, n}, rng, -8.0, 8.0);
        Tensor<float> shifted = x;
        const float c = static_cast<float>(rng.uniform(-50.0, 50.0));
        for (auto& v : shifted.data) v += c;
        auto a = g.softmax(g.input(x));
        auto b = g.softmax(g.input(shifted));
        for (int r = 0; r < 3; ++r) {
            float sum = 0;
            for (int col = 0; col < n; ++col) {
                sum += g.value(a).at(r, col);
                CHECK(g.value(a).at(r, col) == Catch::Approx(g.value(b).at(r, col)).margin(1e-6));
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("softmax rejects non-finite input") {
    Graph<float> g(false);
    auto bad = g.input(Tensor<float>::row({1.0f, std::numeric_limits<float>::infinity()}));
    CHECK_THROWS_AS(g.softmax(bad), std::invalid_argument);
}

TEST_CASE("softmax axis 0 transposes correctly") {
    Graph<float> g(false);
    auto x = g.input(Tensor<float>({2, 2}, {1.0f, 5.0f, 3.0f, 5.0f}));
    auto y = g.softmax(x, 0);
    // column softmax: col0 over {1,3}, col1 over {5,5}
    CHECK(g.value(y).at(0, 1) == Catch::Approx(0.5).margin(1e-6));
    CHECK(g.value(y).at(1, 1) == Catch::Approx(0.5).margin(1e-6));
    const double p = 1.0 / (1.0 + std::exp(2.0));
    CHECK(g.value(y).at(0, 0) == Catch::Approx(p).margin(1e-6));
}

TEST_CASE("cross entropy on uniform logits equals ln V") {
    const int v = 256;
    Graph<float> g(false);
    auto logits = g.input(Tensor<float>({2, v}));
    auto loss = g.cross_entropy_mean(logits, {3, 200});
    CHECK(g.value(loss).data[0] == Catch::Approx(std::log(256.0)).margin(1e-5));
    CHECK(g.value(loss).data[0] == Catch::Approx(5.545177).margin(1e-5));
}

TEST_CASE("cross entropy saturates at zero for a dominant logit") {
    Graph<float> g(false);
    Tensor<float> logits({1, 8});
    logits.at(0, 5) = 1e6f;
    auto loss = g.cross_entropy_mean(g.input(logits), {5});
    CHECK(g.value(loss).data[0] == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("cross entropy matches hand-computed softmax oracle") {
    Graph<float> g(false);
    auto loss = g.cross_entropy_mean(g.input(Tensor<float>::row({1.0f, 2.0f, 3.0f})), {2});
    // oracle: -log(e^3 / (e^1+e^2+e^3))
    const double expect = -std::log(std::exp(3.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
    CHECK(g.value(loss).data[0] == Catch::Approx(expect).margin(1e-6));
    CHECK(g.value(loss).data[0] == Catch::Approx(0.40760596).margin(1e-6));
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    Graph<float> g(false);
    auto logits = g.input(Tensor<float>({1, 4}));
    CHECK_THROWS_AS(g.cross_entropy_mean(logits, {4}), std::invalid_argument);
    CHECK_THROWS_AS(g.cross_entropy_mean(logits, {-1}), std::invalid_argument);
}

TEST_CASE("fused softmax cross entropy survives extreme logits") {
    Graph<float> g(false);
    Tensor<float> logits({1, 4}, {1e4f, -1e4f, 5e3f, 0.0f});
    auto loss = g.cross_entropy_mean(g.input(logits), {0});
    CHECK(std::isfinite(g.value(loss).data[0]));
    CHECK(g.value(loss).data[0] == Catch::Approx(0.0).margin(1e-4));
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(7);
    auto a = random_tensor({17, 13}, rng);
    auto b = random_tensor({13, 9}, rng);
    auto run = [&]() {
        Graph<float> g(false);
        auto y = g.gelu(g.matmul(g.input(a), g.input(b)));
        return g.value(y).data;
    };
    CHECK(run() == run());
}

TEST_CASE("matmul validates shapes") {
    Graph<float> g(false);
    auto a = g.input(Tensor<float>({2, 3}));
    auto b = g.input(Tensor<float>({4, 2}));
    CHECK_THROWS_AS(g.matmul(a, b), std::invalid_argument);
}

TEST_CASE("layernorm rows have zero mean and unit variance") {
    Rng rng(11);
    Graph<float> g(false);
    auto x = random_tensor({5, 64}, rng, -3.0, 7.0);
    auto y = g.layernorm_rows(g.input(x));
    for (int r = 0; r < 5; ++r) {
        double mu = 0, var = 0;
        for (int c = 0; c < 64; ++c) mu += g.value(y).at(r, c);
        mu /= 64;
        for (int c = 0; c < 64; ++c) {
            const double d = g.value(y).at(r, c) - mu;
            var += d * d;
        }
        var /= 64;
        CHECK(mu == Catch::Approx(0.0).margin(1e-5));
        CHECK(var == Catch::Approx(1.0).margin(1e-3));
    }
}

TEST_CASE("bilinear resize preserves constants and clamps at edges") {
    Graph<float> g(false);
    auto x = g.input(Tensor<float>::full({4 * 4, 3}, 0.7f));
    auto y = g.bilinear_resize(x, 4, 4, 9, 9);
    for (float v : g.value(y).data) CHECK(v == Catch::Approx(0.7).margin(1e-6));

    // upsample of a 1x1 grid replicates the single value
    auto one = g.input(Tensor<float>({1, 1}, {0.3f}));
    auto up = g.bilinear_resize(one, 1, 1, 5, 5);
    for (float v : g.value(up).data) CHECK(v == Catch::Approx(0.3).margin(1e-6));
}

TEST_CASE("bilinear downsample averages neighbouring cells (align-corners-false)") {
    // 2x2 -> 1x1 lands exactly between the four pixels
    Graph<float> g(false);
    auto x = g.input(Tensor<float>({4, 1}, {0.0f, 1.0f, 2.0f, 3.0f}));
    auto y = g.bilinear_resize(x, 2, 2, 1, 1);
    CHECK(g.value(y).data[0] == Catch::Approx(1.5).margin(1e-6));
}

TEST_CASE("masked softmax zeroes the disallowed tail") {
    Graph<float> g(false);
    auto x = g.input(Tensor<float>({2, 4}, {1, 2, 3, 4, 1, 1, 1, 1}));
    auto y = g.masked_softmax_rows(x, {2, 4});
    CHECK(g.value(y).at(0, 2) == 0.0f);
    CHECK(g.value(y).at(0, 3) == 0.0f);
    const double p = std::exp(2.0) / (std::exp(1.0) + std::exp(2.0));
    CHECK(g.value(y).at(0, 1) == Catch::Approx(p).margin(1e-6));
    CHECK(g.value(y).at(1, 0) == Catch::Approx(0.25).margin(1e-6));
}

TEST_CASE("fused attention agrees with a primitive composition") {
    Rng rng(23);
    const int s = 10, w = 8, heads = 2;
    auto q = random_tensor({s, w}, rng), k = random_tensor({s, w}, rng), v = random_tensor({s, w}, rng);
    std::vector<cvar::AttnBlock> blocks = {{0, 3, 3}, {3, 7, 7}, {7, 10, 10}};
    std::vector<int> limits(s);
    for (const auto& b : blocks) {
        for (int r = b.row_begin; r < b.row_end; ++r) limits[r] = b.attend_end;
    }

    Graph<float> g(false);
    auto fused = g.attention(g.input(q), g.input(k), g.input(v), heads, blocks);

    // reference: per-head slices + masked softmax + matmuls
    Tensor<float> ref({s, w});
    const int dh = w / heads;
    for (int h = 0; h < heads; ++h) {
        Graph<float> r2(false);
        auto qh = r2.slice_cols(r2.input(q), h * dh, (h + 1) * dh);
        auto kh = r2.slice_cols(r2.input(k), h * dh, (h + 1) * dh);
        auto vh = r2.slice_cols(r2.input(v), h * dh, (h + 1) * dh);
        auto scores = r2.scale(r2.matmul(qh, r2.transpose(kh)), 1.0f / std::sqrt(static_cast<float>(dh)));
        auto probs = r2.masked_softmax_rows(scores, limits);
        auto out = r2.matmul(probs, vh);
        for (int row = 0; row < s; ++row) {
            for (int c = 0; c < dh; ++c) ref.at(row, h * dh + c) = r2.value(out).at(row, c);
        }
    }
    for (size_t i = 0; i < ref.data.size(); ++i) {
        CHECK(g.value(fused).data[i] == Catch::Approx(ref.data[i]).margin(1e-5));
    }
}

TEST_CASE("gather, slice and concat round out the layout ops") {
    Graph<float> g(true);
    Tensor<float> table({3, 2}, {1, 2, 3, 4, 5, 6});
    auto tv = g.param(&table);
    auto picked = g.gather_rows(tv, {2, 0, 2});
    CHECK(g.value(picked).at(0, 0) == 5.0f);
    CHECK(g.value(picked).at(2, 1) == 6.0f);

    auto joined = g.concat_rows({picked, g.slice_rows(tv, 1, 2)});
    CHECK(g.value(joined).shape == std::vector<int>{4, 2});
    CHECK(g.value(joined).at(3, 0) == 3.0f);

    auto loss = g.sum(joined);
    g.backward(loss);
    // row 2 was gathered twice, row 0 once, row 1 once via slice
    CHECK(g.grad(tv).at(2, 0) == 2.0f);
    CHECK(g.grad(tv).at(0, 0) == 1.0f);
    CHECK(g.grad(tv).at(1, 0) == 1.0f);
}

TEST_CASE("gradients of unused parameters are exactly zero") {
    Graph<float> g(true);
    Tensor<float> used({2, 2}, {1, 2, 3, 4});
    Tensor<float> unused({3, 3});
    auto uv = g.param(&used);
    auto nv = g.param(&unused);
    auto loss = g.sum(g.mul(uv, uv));
    g.backward(loss);
    for (float v : g.grad(nv).data) CHECK(v == 0.0f);
    CHECK(g.grad(uv).at(1, 1) == 8.0f);
}

TEST_CASE("ppm round trip is bit exact") {
    Rng rng(3);
    cvar::Image img(6, 5);
    for (auto& p : img.px) p = static_cast<uint8_t>(rng.below(256));
    const std::string path = "test_roundtrip.ppm";
    cvar::write_ppm(path, img);
    const cvar::Image back = cvar::read_ppm(path);
    CHECK(back == img);
    std::remove(path.c_str());
}
