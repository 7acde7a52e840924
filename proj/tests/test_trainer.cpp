#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "cvar/trainer.hpp"

using namespace cvar;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.width = 16;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.n_cls = 4;
    cfg.vocab = 8;
    cfg.schedule = {1, 2, 4};
    return cfg;
}

Codebook tiny_codebook(int vocab) {
    Codebook cb;
    cb.vocab = vocab;
    cb.vecs.resize(3 * static_cast<size_t>(vocab));
    Rng rng(17);
    for (auto& v : cb.vecs) v = static_cast<float>(rng.uniform(-0.3, 0.8));
    return cb;
}

std::vector<TokenizedSample> tiny_dataset(int count, const Codebook& cb, const ScaleSchedule& sched, int n_cls) {
    SceneConfig scfg;
    scfg.h = sched.full_h();
    scfg.w = sched.full_w();
    scfg.n_cls = n_cls;
    std::vector<TokenizedSample> out;
    for (int i = 0; i < count; ++i) {
        out.push_back(tokenize_sample(generate_sample(dataset_sample_seed(7, i), scfg), cb, sched));
    }
    return out;
}

std::vector<float> flatten(const ModelParams<float>& p) {
    std::vector<float> out;
    visit_params(p, [&out](const char*, const Tensor<float>& t) {
        out.insert(out.end(), t.data.begin(), t.data.end());
    });
    return out;
}

}  // namespace

TEST_CASE("control types are sampled uniformly and reproducibly") {
    Rng rng(1);
    std::array<int, kNumControlKinds> counts{};
    const int n = 100000;
    for (int i = 0; i < n; ++i) counts[static_cast<size_t>(sample_control_type(rng))]++;
    const double sigma = std::sqrt(0.25 * 0.75 / n);
    for (int c : counts) {
        CHECK(std::fabs(static_cast<double>(c) / n - 0.25) < 3 * sigma);
    }

    Rng a(9), b(9);
    for (int i = 0; i < 50; ++i) CHECK(sample_control_type(a) == sample_control_type(b));

    Rng c(3);
    for (int i = 0; i < 20; ++i) CHECK(sample_control_type(c, 1) == ControlKind::Mask);
}

TEST_CASE("condition dropout hits each field independently at rate delta") {
    Rng rng(2);
    const Conditioning base{3, 1};

    Conditioning kept = apply_condition_dropout(base, 0.0, rng);
    CHECK(kept.cls == 3);
    CHECK(kept.typ == 1);

    Conditioning dropped = apply_condition_dropout(base, 1.0, rng);
    CHECK(dropped.cls == Conditioning::kEmpty);
    CHECK(dropped.typ == Conditioning::kEmpty);

    const int n = 100000;
    int cls_drops = 0, typ_drops = 0;
    for (int i = 0; i < n; ++i) {
        const Conditioning c = apply_condition_dropout(base, 0.1, rng);
        cls_drops += c.cls == Conditioning::kEmpty;
        typ_drops += c.typ == Conditioning::kEmpty;
    }
    const double sigma = std::sqrt(0.1 * 0.9 / n);
    CHECK(std::fabs(static_cast<double>(cls_drops) / n - 0.1) < 3 * sigma);
    CHECK(std::fabs(static_cast<double>(typ_drops) / n - 0.1) < 3 * sigma);
}

TEST_CASE("initial loss sits near ln V for both streams") {
    const ModelConfig cfg = tiny_cfg();
    const Codebook cb = tiny_codebook(cfg.vocab);
    const ScaleSchedule sched = cfg.scale_schedule();
    const SequenceLayout layout = SequenceLayout::build(sched);
    const auto data = tiny_dataset(2, cb, sched, cfg.n_cls);
    const auto p = init_params<float>(123, cfg);

    Graph<float> g(false);
    const auto pv = register_params(g, p);
    const auto logits = model_forward(g, pv, p, layout, cb, data[0].controls[0], data[0].image,
                                      Conditioning{data[0].cls, 0});
    const auto loss = model_loss(g, logits, data[0].controls[0], data[0].image);
    const double lnv = std::log(static_cast<double>(cfg.vocab));
    CHECK(g.value(loss.ctrl).data[0] > 0.8 * lnv);
    CHECK(g.value(loss.ctrl).data[0] < 1.2 * lnv);
    CHECK(g.value(loss.img).data[0] > 0.8 * lnv);
    CHECK(g.value(loss.img).data[0] < 1.2 * lnv);
}

TEST_CASE("training reduces the loss and keeps it finite") {
    const ModelConfig cfg = tiny_cfg();
    const Codebook cb = tiny_codebook(cfg.vocab);
    const ScaleSchedule sched = cfg.scale_schedule();
    const auto data = tiny_dataset(2, cb, sched, cfg.n_cls);

    auto p = init_params<float>(5, cfg);
    AdamState opt = AdamState::zeros_like(p);
    TrainConfig tc;
    tc.batch = 2;
    tc.steps = 40;
    tc.lr = 5e-3;
    tc.delta = 0.0;
    tc.seed = 11;
    Trainer trainer(p, opt, data, cb, tc);
    double first = 0, last = 0;
    for (int64_t s = 0; s < tc.steps; ++s) {
        const StepStats st = trainer.step(s);
        CHECK(std::isfinite(st.loss_total));
        if (s == 0) first = st.loss_total;
        last = st.loss_total;
    }
    CHECK(last < 0.8 * first);
}

TEST_CASE("resume from checkpoint reproduces the uninterrupted run bit-exactly") {
    namespace fs = std::filesystem;
    const ModelConfig cfg = tiny_cfg();
    const Codebook cb = tiny_codebook(cfg.vocab);
    const ScaleSchedule sched = cfg.scale_schedule();
    const auto data = tiny_dataset(3, cb, sched, cfg.n_cls);

    TrainConfig tc;
    tc.batch = 2;
    tc.steps = 6;
    tc.lr = 2e-3;
    tc.seed = 21;
    tc.ckpt_every = 3;

    const std::string dir_a = "train_test_a", dir_b = "train_test_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    // uninterrupted
    auto pa = init_params<float>(77, cfg);
    const RunResult ra = run_training(pa, data, cb, tc, dir_a, "hash_a");

    // interrupted at step 3, resumed from the mid checkpoint
    auto pb = init_params<float>(77, cfg);
    TrainConfig tc_half = tc;
    tc_half.steps = 3;
    run_training(pb, data, cb, tc_half, dir_b, "hash_b");
    auto pc = init_params<float>(99, cfg);  // deliberately different; resume must overwrite
    const RunResult rc = run_training(pc, data, cb, tc, dir_b, "hash_b", nullptr, dir_b + "/ckpt_3.cvar");

    CHECK(flatten(pa) == flatten(pc));
    CHECK(ra.final_loss_total == rc.final_loss_total);
    CHECK(fs::exists(ra.final_checkpoint));

    // the saved checkpoints agree bit-for-bit on parameters
    const auto qa = read_checkpoint(dir_a + "/ckpt_6.cvar");
    const auto qc = read_checkpoint(dir_b + "/ckpt_6.cvar");
    CHECK(flatten(qa) == flatten(qc));

    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
}

TEST_CASE("token cache round trips and is keyed to the codebook") {
    namespace fs = std::filesystem;
    const std::string dir = "token_cache_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    SceneConfig scfg;
    scfg.h = 16;
    scfg.w = 16;
    const ScaleSchedule sched = ScaleSchedule::square({1, 2, 4, 8, 16});
    build_dataset(scfg, dir, 4, 99);
    const Codebook cb = tiny_codebook(8);

    const auto first = load_or_build_token_cache(dir + "/manifest.jsonl", cb, sched);
    CHECK(fs::exists(dir + "/tokens.cvtk"));
    const auto second = load_or_build_token_cache(dir + "/manifest.jsonl", cb, sched);
    REQUIRE(first.size() == second.size());
    for (size_t i = 0; i < first.size(); ++i) {
        CHECK(first[i].image.tokens == second[i].image.tokens);
        CHECK(first[i].controls[2].tokens == second[i].controls[2].tokens);
        CHECK(first[i].cls == second[i].cls);
    }

    // direct encode agrees with the cached tokens
    const auto recs = load_manifest(dir + "/manifest.jsonl");
    const auto direct = encode(read_ppm(dir + "/" + recs[1].image), cb, sched);
    CHECK(first[1].image.tokens == direct.tokens);

    // a different codebook invalidates the cache and rebuilds
    Codebook cb2 = cb;
    cb2.vecs[0] += 0.25f;
    const auto third = load_or_build_token_cache(dir + "/manifest.jsonl", cb2, sched);
    CHECK(third.size() == first.size());
    fs::remove_all(dir);
}
