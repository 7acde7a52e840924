#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "cvar/guidance.hpp"
#include "cvar/model.hpp"
#include "cvar/rng.hpp"

using namespace cvar;

namespace {

ModelConfig gen_cfg() {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.n_cls = 4;
    cfg.vocab = 8;
    cfg.schedule = {1, 2, 4};
    return cfg;
}

Codebook gen_codebook(int vocab, uint64_t seed) {
    Codebook cb;
    cb.vocab = vocab;
    cb.vecs.resize(3 * static_cast<size_t>(vocab));
    Rng rng(seed);
    for (auto& v : cb.vecs) v = static_cast<float>(rng.uniform(-0.3, 0.8));
    return cb;
}

ScaleTokenMaps random_payload(const ScaleSchedule& sched, int vocab, uint64_t seed) {
    Rng rng(seed);
    ScaleTokenMaps t;
    t.tokens.resize(static_cast<size_t>(sched.positions()));
    for (auto& v : t.tokens) v = rng.below_int(vocab);
    return t;
}

}  // namespace

TEST_CASE("annealing follows gamma * t / T") {
    const int T = 6;
    CHECK(anneal(3.0, T, T, AnnealMode::Linear) == Catch::Approx(3.0));
    CHECK(anneal(3.0, 0, T, AnnealMode::Linear) == Catch::Approx(0.0));
    CHECK(anneal(2.5, T / 2, T, AnnealMode::Linear) == Catch::Approx(1.25));
    CHECK(anneal(2.5, 2, T, AnnealMode::Off) == Catch::Approx(2.5));
}

TEST_CASE("tfg_combine telescopes bit-exactly at unit and zero scales") {
    Rng rng(404);
    const int n = 32;
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<float> xu(n), xtf(n), xty(n), xf(n);
        for (int i = 0; i < n; ++i) {
            xu[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-30, 30));
            xtf[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-30, 30));
            xty[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-30, 30));
            xf[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-30, 30));
        }
        const auto unit = tfg_combine(xu, xtf, xty, xf, 1.0, 1.0, 1.0);
        REQUIRE(unit == xf);  // bitwise
        const auto zero = tfg_combine(xu, xtf, xty, xf, 0.0, 0.0, 0.0);
        REQUIRE(zero == xu);  // bitwise
    }
}

TEST_CASE("equal scales reduce to classic classifier-free guidance") {
    Rng rng(405);
    const int n = 16;
    const double g = 2.5;
    std::vector<float> xu(n), xtf(n), xty(n), xf(n);
    for (int i = 0; i < n; ++i) {
        xu[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-10, 10));
        xtf[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-10, 10));
        xty[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-10, 10));
        xf[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-10, 10));
    }
    const auto got = tfg_combine(xu, xtf, xty, xf, g, g, g);
    for (int i = 0; i < n; ++i) {
        const double expect = xu[static_cast<size_t>(i)] + g * (xf[static_cast<size_t>(i)] - xu[static_cast<size_t>(i)]);
        CHECK(got[static_cast<size_t>(i)] == Catch::Approx(expect).margin(1e-4));
    }
}

TEST_CASE("adding a shared constant never moves the combined argmax") {
    Rng rng(406);
    const int n = 24;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<float> xu(n), xtf(n), xty(n), xf(n);
        for (int i = 0; i < n; ++i) {
            xu[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-5, 5));
            xtf[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-5, 5));
            xty[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-5, 5));
            xf[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-5, 5));
        }
        const double gc = rng.uniform(0, 3), gt = rng.uniform(0, 3), gp = rng.uniform(0, 3);
        const auto a = tfg_combine(xu, xtf, xty, xf, gc, gt, gp);
        const float c = static_cast<float>(rng.uniform(-20, 20));
        auto shift = [c](std::vector<float> v) {
            for (auto& x : v) x += c;
            return v;
        };
        const auto b = tfg_combine(shift(xu), shift(xtf), shift(xty), shift(xf), gc, gt, gp);
        const auto am = [](const std::vector<float>& v) {
            return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
        };
        CHECK(am(a) == am(b));
    }
}

TEST_CASE("top-k=1 is argmax; invalid inputs throw") {
    std::vector<float> logits = {0.1f, 2.0f, -1.0f, 1.9f};
    Rng rng(1);
    for (int i = 0; i < 20; ++i) CHECK(sample_topk_topp(logits.data(), 4, 1, 1.0, rng) == 1);

    CHECK_THROWS_AS(sample_topk_topp(logits.data(), 4, 0, 1.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_topk_topp(logits.data(), 4, 5, 1.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_topk_topp(logits.data(), 4, 2, 0.0, rng), std::invalid_argument);
    std::vector<float> ninf(4, -std::numeric_limits<float>::infinity());
    CHECK_THROWS_AS(sample_topk_topp(ninf.data(), 4, 2, 0.9, rng), std::invalid_argument);
}

TEST_CASE("nucleus rule matches the hand enumeration") {
    // probs (.5,.3,.2), p=0.7 -> support {0,1} renormalized to (.625,.375)
    std::vector<float> logits = {std::log(0.5f), std::log(0.3f), std::log(0.2f)};
    Rng rng(7);
    const int n = 40000;
    int c0 = 0, c1 = 0, c2 = 0;
    for (int i = 0; i < n; ++i) {
        const int s = sample_topk_topp(logits.data(), 3, 3, 0.7, rng);
        c0 += s == 0;
        c1 += s == 1;
        c2 += s == 2;
    }
    CHECK(c2 == 0);
    const double f0 = static_cast<double>(c0) / n;
    const double sigma = std::sqrt(0.625 * 0.375 / n);
    CHECK(std::fabs(f0 - 0.625) < 3 * sigma);
    CHECK(c0 + c1 == n);
}

TEST_CASE("k=V p=1 reproduces the softmax distribution within 3 sigma") {
    std::vector<float> logits = {0.2f, -0.5f, 1.3f, 0.0f, -1.0f, 0.7f};
    const int v = 6;
    std::vector<double> probs(v);
    double z = 0;
    for (int i = 0; i < v; ++i) {
        probs[static_cast<size_t>(i)] = std::exp(static_cast<double>(logits[static_cast<size_t>(i)]));
        z += probs[static_cast<size_t>(i)];
    }
    for (auto& p : probs) p /= z;
    Rng rng(8);
    const int n = 100000;
    std::vector<int> counts(v, 0);
    for (int i = 0; i < n; ++i) counts[static_cast<size_t>(sample_topk_topp(logits.data(), v, v, 1.0, rng))]++;
    for (int i = 0; i < v; ++i) {
        const double f = static_cast<double>(counts[static_cast<size_t>(i)]) / n;
        const double sigma = std::sqrt(probs[static_cast<size_t>(i)] * (1 - probs[static_cast<size_t>(i)]) / n);
        CHECK(std::fabs(f - probs[static_cast<size_t>(i)]) < 3 * sigma + 1e-12);
    }
}

TEST_CASE("exact table oracle: unit scales recover the true conditional") {
    Rng rng(9);
    for (int i = 0; i < 25; ++i) {
        const JointTable t = JointTable::random(rng);
        CHECK(verify_tfg_identity(t) < 1e-9);
    }
    CHECK(verify_guidance_suite(10, 123) < 1e-9);
}

TEST_CASE("independent tables: conditional equals marginal, even at zero scales") {
    Rng rng(10);
    for (int i = 0; i < 10; ++i) {
        const JointTable t = JointTable::independent(rng);
        // p(I | C,c,ct) == p(I) for every conditioning choice
        std::vector<double> marginal(static_cast<size_t>(t.n_i), 0.0);
        for (int ii = 0; ii < t.n_i; ++ii) {
            for (int c = 0; c < t.n_c; ++c) {
                for (int cl = 0; cl < t.n_cls; ++cl) {
                    for (int ty = 0; ty < t.n_typ; ++ty) marginal[static_cast<size_t>(ii)] += t.at(ii, c, cl, ty);
                }
            }
        }
        for (int c = 0; c < t.n_c; ++c) {
            const auto cond = oracle_exact(t, c, 0, 1);
            for (int ii = 0; ii < t.n_i; ++ii) {
                CHECK(cond[static_cast<size_t>(ii)] == Catch::Approx(marginal[static_cast<size_t>(ii)]).margin(1e-12));
            }
        }
        // with all scales zero the combination degenerates to the p(I) branch
        CHECK(verify_tfg_identity(t, 0.0, 0.0, 0.0) < 1e-9);
    }
}

TEST_CASE("control-to-image with unit scales equals pure x_full sampling") {
    const ModelConfig cfg = gen_cfg();
    const auto p = init_params<float>(50, cfg);
    const Codebook cb = gen_codebook(cfg.vocab, 51);
    const ScaleSchedule sched = cfg.scale_schedule();
    const SequenceLayout layout = SequenceLayout::build(sched);

    TaskSpec task;
    task.mode = TaskMode::ControlToImage;
    task.payload_ctrl = random_payload(sched, cfg.vocab, 52);
    task.cond = Conditioning{2, 0};
    GuidanceSpec g;
    g.gamma_cls = g.gamma_typ = g.gamma_pix = 1.0;
    SamplerConfig sc{4, 0.9};
    const uint64_t seed = 777;

    const GenerateResult res = generate(p, cb, sched, task, g, sc, seed);

    // independent single-branch reference: teacher-force the control, sample
    // the image from the fully-conditioned logits with the same stream
    Rng rng_ref = Rng(mix64(seed ^ 0x9E7A11ull)).derive(1);
    ScaleTokenMaps img_state;
    img_state.tokens.assign(static_cast<size_t>(sched.positions()), 0);
    for (int t = 0; t < sched.count(); ++t) {
        const ScaleLogits l =
            forward_scale_logits(p, layout, cb, task.payload_ctrl, img_state, t, task.cond, false, true);
        for (int c = 0; c < sched.cells(t); ++c) {
            img_state.tokens[static_cast<size_t>(sched.offset(t) + c)] = sample_topk_topp(l.img, c, sc, rng_ref);
        }
    }
    CHECK(res.img.tokens == img_state.tokens);
    CHECK(res.ctrl.tokens == task.payload_ctrl.tokens);

    // four branch forwards per scale (the four combination terms)
    for (int f : res.forwards_per_scale) CHECK(f == 4);
}

TEST_CASE("generation is deterministic in the seed") {
    const ModelConfig cfg = gen_cfg();
    const auto p = init_params<float>(60, cfg);
    const Codebook cb = gen_codebook(cfg.vocab, 61);
    const ScaleSchedule sched = cfg.scale_schedule();

    TaskSpec task;
    task.mode = TaskMode::JointGen;
    task.cond = Conditioning{1, 2};
    GuidanceSpec g;
    SamplerConfig sc{8, 0.96};
    const auto a = generate(p, cb, sched, task, g, sc, 99);
    const auto b = generate(p, cb, sched, task, g, sc, 99);
    const auto c = generate(p, cb, sched, task, g, sc, 100);
    CHECK(a.ctrl.tokens == b.ctrl.tokens);
    CHECK(a.img.tokens == b.img.tokens);
    CHECK(a.img.tokens != c.img.tokens);
    for (int f : a.forwards_per_scale) CHECK(f == 2);
}

TEST_CASE("image-to-control and control-to-control share the role-swapped path") {
    const ModelConfig cfg = gen_cfg();
    const auto p = init_params<float>(70, cfg);
    const Codebook cb = gen_codebook(cfg.vocab, 71);
    const ScaleSchedule sched = cfg.scale_schedule();

    TaskSpec task;
    task.mode = TaskMode::ImageToControl;
    task.payload_img = random_payload(sched, cfg.vocab, 72);
    task.cond = Conditioning{0, 1};
    const auto res = generate(p, cb, sched, task, GuidanceSpec{}, SamplerConfig{8, 0.96}, 5);
    CHECK(res.img.tokens == task.payload_img.tokens);
    for (int f : res.forwards_per_scale) CHECK(f == 4);

    TaskSpec c2c = task;
    c2c.mode = TaskMode::ControlToControl;
    c2c.cond.typ = 3;  // output kind
    const auto res2 = generate(p, cb, sched, c2c, GuidanceSpec{}, SamplerConfig{8, 0.96}, 5);
    CHECK(res2.img.tokens == c2c.payload_img.tokens);
    CHECK(res2.ctrl.tokens.size() == res.ctrl.tokens.size());
}

TEST_CASE("completion forces known cells from the payload at every scale") {
    const ModelConfig cfg = gen_cfg();
    const auto p = init_params<float>(80, cfg);
    const Codebook cb = gen_codebook(cfg.vocab, 81);
    const ScaleSchedule sched = cfg.scale_schedule();
    const int fh = sched.full_h(), fw = sched.full_w();

    TaskSpec task;
    task.mode = TaskMode::Completion;
    task.payload_ctrl = random_payload(sched, cfg.vocab, 82);
    task.payload_img = random_payload(sched, cfg.vocab, 83);
    task.known.assign(static_cast<size_t>(fh) * fw, 0);
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw / 2; ++x) task.known[static_cast<size_t>(y) * fw + x] = 1;  // left half known
    }
    task.cond = Conditioning{3, 2};

    const auto res = generate(p, cb, sched, task, GuidanceSpec{}, SamplerConfig{8, 0.96}, 6);
    for (int t = 0; t < sched.count(); ++t) {
        const auto kc = known_cells(task.known, sched, t);
        for (int c = 0; c < sched.cells(t); ++c) {
            if (!kc[static_cast<size_t>(c)]) continue;
            const size_t at = static_cast<size_t>(sched.offset(t) + c);
            CHECK(res.ctrl.tokens[at] == task.payload_ctrl.tokens[at]);
            CHECK(res.img.tokens[at] == task.payload_img.tokens[at]);
        }
    }
    // left-half cells are known at the full scale, right-half are not
    const auto kc_full = known_cells(task.known, sched, sched.count() - 1);
    CHECK(kc_full[0] == 1);
    CHECK(kc_full[static_cast<size_t>(fw - 1)] == 0);
}

TEST_CASE("mode and payload mismatches are rejected") {
    const ModelConfig cfg = gen_cfg();
    const auto p = init_params<float>(90, cfg);
    const Codebook cb = gen_codebook(cfg.vocab, 91);
    const ScaleSchedule sched = cfg.scale_schedule();

    TaskSpec task;
    task.mode = TaskMode::ControlToImage;  // but no payload
    CHECK_THROWS_AS(generate(p, cb, sched, task, GuidanceSpec{}, SamplerConfig{8, 0.96}, 1),
                    std::invalid_argument);

    TaskSpec bad_gamma;
    bad_gamma.mode = TaskMode::JointGen;
    GuidanceSpec g;
    g.gamma_pix = -1.0;
    CHECK_THROWS_AS(generate(p, cb, sched, bad_gamma, g, SamplerConfig{8, 0.96}, 1), std::invalid_argument);
}
