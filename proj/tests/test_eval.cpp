#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cvar/config.hpp"
#include "cvar/eval.hpp"
#include "cvar/synth.hpp"

using namespace cvar;

namespace {

Image step_image(int h, int w, int col) {
    Image img(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = col; x < w; ++x) img.set(y, x, 255, 255, 255);
    }
    return img;
}

}  // namespace

TEST_CASE("boundary f1 basics: identical, disjoint, shifted, empty") {
    SceneConfig cfg;
    const SynthSample s = generate_sample(42, cfg);
    CHECK(boundary_f1(s.image, s.image) == Catch::Approx(1.0));

    // far-apart step edges never match at 1 px tolerance
    CHECK(boundary_f1(step_image(32, 32, 5), step_image(32, 32, 25)) == Catch::Approx(0.0));

    // a 1-px shifted step still matches fully at tolerance 1
    CHECK(boundary_f1(step_image(32, 32, 10), step_image(32, 32, 11), 1) == Catch::Approx(1.0));

    // both edge-free -> 1.0 by convention, one edge-free -> 0.0
    Image flat_a(16, 16), flat_b(16, 16);
    for (auto& v : flat_b.px) v = 200;
    CHECK(boundary_f1(flat_a, flat_b) == Catch::Approx(1.0));
    CHECK(boundary_f1(flat_a, step_image(16, 16, 8)) == Catch::Approx(0.0));
}

TEST_CASE("boundary f1 is symmetric") {
    SceneConfig cfg;
    const SynthSample a = generate_sample(1, cfg);
    const SynthSample b = generate_sample(2, cfg);
    CHECK(boundary_f1(a.mask.pixels, b.image) == Catch::Approx(boundary_f1(b.image, a.mask.pixels)));
    CHECK(boundary_f1(a.edge.pixels, b.edge.pixels) ==
          Catch::Approx(boundary_f1(b.edge.pixels, a.edge.pixels)));
}

TEST_CASE("token accuracy counts exact matches overall and per scale") {
    const ScaleSchedule sched = ScaleSchedule::square({1, 2, 4});
    ScaleTokenMaps truth, pred;
    truth.tokens = {5, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2};
    pred = truth;
    pred.tokens[0] = 4;                      // scale 0 miss
    for (int i = 5; i < 13; ++i) pred.tokens[static_cast<size_t>(i)] = 9;  // 8 misses at scale 2
    const TokenAccuracy acc = control_token_accuracy(pred, truth, sched);
    CHECK(acc.per_scale[0] == Catch::Approx(0.0));
    CHECK(acc.per_scale[1] == Catch::Approx(1.0));
    CHECK(acc.per_scale[2] == Catch::Approx(0.5));
    CHECK(acc.overall == Catch::Approx(12.0 / 21.0));
}

TEST_CASE("feature frechet distance: identity, symmetry, noise ordering") {
    SceneConfig cfg;
    std::vector<SynthSample> samples;
    for (int i = 0; i < 32; ++i) samples.push_back(generate_sample(dataset_sample_seed(5, i), cfg));
    std::vector<const Image*> half_a, half_b, all;
    for (int i = 0; i < 16; ++i) half_a.push_back(&samples[static_cast<size_t>(i)].image);
    for (int i = 16; i < 32; ++i) half_b.push_back(&samples[static_cast<size_t>(i)].image);
    for (auto& s : samples) all.push_back(&s.image);

    CHECK(feature_frechet_distance(all, all) < 1e-6);
    const double ab = feature_frechet_distance(half_a, half_b);
    const double ba = feature_frechet_distance(half_b, half_a);
    CHECK(std::fabs(ab - ba) < 1e-6);
    CHECK(ab >= 0.0);

    std::vector<Image> noise_imgs;
    Rng rng(123);
    for (int i = 0; i < 16; ++i) {
        Image n(cfg.h, cfg.w);
        for (auto& p : n.px) p = static_cast<uint8_t>(rng.below(256));
        noise_imgs.push_back(std::move(n));
    }
    std::vector<const Image*> noise;
    for (auto& n : noise_imgs) noise.push_back(&n);
    CHECK(feature_frechet_distance(noise, half_a) > ab);
}

TEST_CASE("feature net is deterministic in its seed") {
    SceneConfig cfg;
    const SynthSample s = generate_sample(7, cfg);
    const FeatureNet a(190), b(190), c(191);
    CHECK(a.features(s.image) == b.features(s.image));
    CHECK(a.features(s.image) != c.features(s.image));
}

TEST_CASE("config defaults are canonical and reject unknown keys") {
    Config c;
    const std::string canon = c.canonical();
    const Config reparsed = Config::from_json(nlohmann::json::parse(canon));
    CHECK(reparsed.canonical() == canon);
    CHECK(c.hash().size() == 64);

    CHECK_THROWS_AS(Config::from_json(nlohmann::json{{"nope", 1}}), std::invalid_argument);
    CHECK_THROWS_AS(Config::from_json(nlohmann::json{{"train", {{"velocity", 3}}}}), std::invalid_argument);
    CHECK_THROWS_AS(Config::from_json(nlohmann::json{{"train", {{"batch", "eight"}}}}), std::invalid_argument);

    const Config o = Config::from_json(nlohmann::json{{"model", {{"width", 96}}}, {"train", {{"steps", 7}}}});
    CHECK(o.model_config().width == 96);
    CHECK(o.train_config().steps == 7);
    CHECK(o.model_config().layers == 8);
    CHECK(o.hash() != c.hash());
}

TEST_CASE("config sections map onto subsystem structs") {
    Config c;
    const SceneConfig s = c.scene_config();
    CHECK(s.h == 32);
    CHECK(s.colormap_nh == 8);
    const ModelConfig m = c.model_config();
    CHECK(m.vocab == 256);
    CHECK(m.schedule == std::vector<int>{1, 2, 4, 8, 16, 32});
    const SamplerConfig sc = c.sampler_config();
    CHECK(sc.topk == 64);
    CHECK(sc.topp == Catch::Approx(0.96));
    const GuidanceSpec g = c.guidance_spec();
    CHECK(g.gamma_pix == Catch::Approx(2.0));
    CHECK(g.anneal == AnnealMode::Off);
}

TEST_CASE("sha256 matches known vectors") {
    CHECK(Sha256::hex(std::string("")) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(Sha256::hex(std::string("abc")) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
