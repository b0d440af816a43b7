#include "doctest.h"

#include "imccd/decode.hpp"
#include "imccd/errors.hpp"
#include "test_support.hpp"

#include <cmath>
#include <limits>

using namespace imccd;
using imccd::testing::random_prompt;
using imccd::testing::small_config;

namespace {

std::vector<float> random_logits(std::size_t n, std::uint64_t seed, double scale = 3.0) {
    Rng rng(seed);
    std::vector<float> v(n);
    for (float& x : v) x = float(scale * rng.normal());
    return v;
}

std::size_t argmax(const std::vector<double>& p) {
    return std::size_t(std::max_element(p.begin(), p.end()) - p.begin());
}

}  // namespace

TEST_SUITE("decode") {

TEST_CASE("fusion worked example") {
    const std::vector<float> l{1, 2}, lt{2, 1};
    const auto p = fuse_logits(l, lt, 1.0);
    const double e3 = std::exp(3.0);
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + e3)).epsilon(1e-12));
    CHECK(p[1] == doctest::Approx(e3 / (1.0 + e3)).epsilon(1e-12));
    CHECK(p[0] == doctest::Approx(0.0474).epsilon(1e-3));
}

TEST_CASE("alpha zero and equal branches reduce to the plain softmax") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto l = random_logits(50, seed), lt = random_logits(50, seed + 100);
        const std::vector<double> ld(l.begin(), l.end());
        const auto ref = softmax(ld);
        const auto a0 = fuse_logits(l, lt, 0.0);
        const auto same = fuse_logits(l, l, 0.1 + double(seed));
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(std::abs(a0[i] - ref[i]) <= 1e-6);
            CHECK(std::abs(same[i] - ref[i]) <= 1e-6);
        }
    }
}

TEST_CASE("a shared shift cancels") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto l = random_logits(30, seed), lt = random_logits(30, seed + 50);
        const auto before = fuse_logits(l, lt, 1.5);
        const float c = float(seed) * 0.37f - 3.0f;
        for (auto& x : l) x += c;
        for (auto& x : lt) x += c;
        const auto after = fuse_logits(l, lt, 1.5);
        for (std::size_t i = 0; i < before.size(); ++i) CHECK(std::abs(before[i] - after[i]) <= 1e-6);
        CHECK(argmax(before) == argmax(after));
    }
}

TEST_CASE("fusion rejects NaN") {
    const std::vector<float> l{1, std::nanf("")}, lt{0, 0};
    CHECK_THROWS_AS(fuse_logits(l, lt, 1.0), NumericError);
}

TEST_CASE("plausibility filter") {
    auto logits_for = [](std::vector<double> p) {
        std::vector<float> l;
        for (double x : p) l.push_back(float(std::log(x)));
        return l;
    };
    const auto l = logits_for({0.5, 0.3, 0.2});
    CHECK(plausible_candidates(l, 0.5) == std::vector<bool>{true, true, false});
    CHECK(plausible_candidates(l, 0.0) == std::vector<bool>{true, true, true});
    CHECK(plausible_candidates(l, 1.0) == std::vector<bool>{true, false, false});
    const auto f = plausibility_filter(l, 0.5);
    CHECK(std::isinf(f[2]));
    CHECK(f[2] < 0);
    CHECK(f[0] == double(l[0]));

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = plausible_candidates(random_logits(40, seed, 10.0), 1.0);
        CHECK(std::count(c.begin(), c.end(), true) >= 1);
    }
}

TEST_CASE("filtered fusion gives excluded tokens zero probability") {
    const std::vector<float> l{3, 2, -5}, lt{0, 4, -9};
    const auto cand = plausible_candidates(l, 0.1);
    const auto p = fuse_logits(l, lt, 1.0, cand);
    CHECK(p[2] == 0.0);
    CHECK(std::abs(p[0] + p[1] - 1.0) <= 1e-12);
}

TEST_CASE("greedy sampling") {
    Rng rng(0);
    CHECK(sample_next(std::vector<double>{0.1, 0.8, 0.1}, SamplingMode::greedy, 1.0, rng) == 1);
    CHECK(sample_next(std::vector<double>{0.5, 0.5}, SamplingMode::greedy, 1.0, rng) == 0);
}

TEST_CASE("seeded temperature sampling is reproducible") {
    const std::vector<double> p{0.1, 0.2, 0.3, 0.4};
    auto draw = [&](std::uint64_t seed) {
        Rng rng(seed);
        std::vector<TokenId> out;
        for (int i = 0; i < 200; ++i) out.push_back(sample_next(p, SamplingMode::temperature, 0.7, rng));
        return out;
    };
    CHECK(draw(5) == draw(5));
    CHECK(draw(5) != draw(6));
    const auto seq = draw(9);
    CHECK(std::count(seq.begin(), seq.end(), 3u) > std::count(seq.begin(), seq.end(), 0u));
}

TEST_CASE("entropy of a uniform distribution") {
    CHECK(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}) == doctest::Approx(std::log(4.0)));
    CHECK(entropy(std::vector<double>{1.0, 0.0}) == 0.0);
}

TEST_CASE("method names round-trip") {
    for (Method m : {Method::baseline, Method::cmved, Method::cmved_cdar, Method::vcd_lite, Method::icd_lite})
        CHECK(parse_method(to_string(m)) == m);
    CHECK(to_string(Method::cmved_cdar) == "cmved+cdar");
    CHECK_THROWS_AS(parse_method("vcd"), ConfigError);
}

TEST_CASE("config validation") {
    DecodeConfig c;
    CHECK_NOTHROW(c.validate(6));
    c.alpha = -1;
    CHECK_THROWS_AS(c.validate(6), ConfigError);
    c = {};
    c.beta = 1.5;
    CHECK_THROWS_AS(c.validate(6), ConfigError);
    c = {};
    c.mode = SamplingMode::temperature;
    c.temperature = 0;
    CHECK_THROWS_AS(c.validate(6), ConfigError);
    c = {};
    c.cdar.layers = 8;
    CHECK_THROWS_AS(c.validate(6), ConfigError);
}

TEST_CASE("baseline and cmved with alpha zero generate the same tokens") {
    const ModelConfig cfg = small_config();
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const ModelWeights w = random_weights(cfg, derive_seed(50, seed));
        const Prompt p = random_prompt(cfg, {2, 4, 5}, derive_seed(51, seed));
        DecodeConfig base, cm;
        base.method = Method::baseline;
        cm.method = Method::cmved;
        cm.alpha = 0.0;
        base.max_new_tokens = cm.max_new_tokens = 8;
        CHECK(generate(w, p, base).tokens == generate(w, p, cm).tokens);
    }
}

TEST_CASE("zero new tokens is an empty generation") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 52);
    DecodeConfig c;
    c.max_new_tokens = 0;
    const auto r = generate(w, random_prompt(cfg, {1, 2, 3}, 53), c);
    CHECK(r.tokens.empty());
    CHECK(r.steps.empty());
    CHECK(r.original_cost == CostCounters{});
    CHECK(r.distorted_cost == CostCounters{});
}

TEST_CASE("generation stops at the end token") {
    const ModelConfig cfg = small_config();
    ModelWeights w = random_weights(cfg, 54);
    std::fill(w.head_bias.begin(), w.head_bias.end(), -100.0f);
    w.head_bias[7] = 100.0f;
    DecodeConfig c;
    c.eos_token = 7;
    c.max_new_tokens = 10;
    const auto r = generate(w, random_prompt(cfg, {1, 2, 3}, 55), c);
    CHECK(r.tokens == std::vector<TokenId>{7});
}

TEST_CASE("cmved per-step distorted cost tracks the post-image length") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 56);
    const Prompt p = random_prompt(cfg, {2, 5, 6}, 57);
    DecodeConfig c;
    c.method = Method::cmved;
    c.max_new_tokens = 6;
    const auto r = generate(w, p, c);
    for (std::size_t s = 0; s < r.steps.size(); ++s) {
        CHECK(r.steps[s].distorted_cost.token_forwards == p.layout.query_len() + s);
        CHECK(r.steps[s].original_cost.token_forwards == (s == 0 ? p.layout.prompt_len() : 1));
    }
}

TEST_CASE("vcd-lite: zero noise reproduces the baseline") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 58);
    const Prompt p = random_prompt(cfg, {2, 4, 5}, 59);
    CHECK(vcd_lite_distort(p.image_patches, 0.0, 3) == p.image_patches);
    DecodeConfig v, b;
    v.method = Method::vcd_lite;
    v.vcd_noise_scale = 0.0;
    b.method = Method::baseline;
    v.max_new_tokens = b.max_new_tokens = 5;
    const auto rv = generate(w, p, v), rb = generate(w, p, b);
    CHECK(rv.tokens == rb.tokens);
    for (std::size_t s = 0; s < rv.steps.size(); ++s) {
        CHECK(rv.steps[s].logits.original == rv.steps[s].logits.distorted);
        for (std::size_t t = 0; t < rv.steps[s].logits.fused.size(); ++t)
            CHECK(std::abs(rv.steps[s].logits.fused[t] - rb.steps[s].logits.fused[t]) <= 1e-12);
    }
}

TEST_CASE("vcd-lite is reproducible per seed") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 60);
    const Prompt p = random_prompt(cfg, {2, 4, 5}, 61);
    CHECK(vcd_lite_distort(p.image_patches, 1.0, 4) == vcd_lite_distort(p.image_patches, 1.0, 4));
    CHECK_FALSE(vcd_lite_distort(p.image_patches, 1.0, 4) == vcd_lite_distort(p.image_patches, 1.0, 5));
    DecodeConfig v;
    v.method = Method::vcd_lite;
    v.vcd_seed = 8;
    v.max_new_tokens = 4;
    const auto a = generate(w, p, v), b = generate(w, p, v);
    REQUIRE(a.steps.size() == b.steps.size());
    for (std::size_t s = 0; s < a.steps.size(); ++s) CHECK(a.steps[s].logits.distorted == b.steps[s].logits.distorted);
}

TEST_CASE("full second forward costs at least the suffix replay") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 62);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const Prompt p = random_prompt(cfg, {2, 6, 6}, derive_seed(63, seed));
        DecodeConfig cm, v;
        cm.method = Method::cmved;
        v.method = Method::vcd_lite;
        cm.max_new_tokens = v.max_new_tokens = 6;
        const auto rc = generate(w, p, cm), rv = generate(w, p, v);
        CHECK(rv.distorted_cost.token_forwards >= rc.distorted_cost.token_forwards);
        CHECK(rv.distorted_cost.macs >= rc.distorted_cost.macs);
        for (std::size_t s = 0; s < rv.steps.size(); ++s)
            CHECK(rv.steps[s].distorted_cost.token_forwards == p.layout.prompt_len() + s);
    }
}

TEST_CASE("icd-lite prepends the prefix to the system segment") {
    Prompt p;
    p.text_tokens = {0, 6, 7, 8, 9};
    p.layout = {3, 2, 5};
    p.image_patches = Matrix(2, 4);
    const std::vector<TokenId> prefix{22, 22};
    const Prompt d = icd_lite_distort(p, prefix);
    CHECK(d.text_tokens == std::vector<TokenId>{22, 22, 0, 6, 7, 8, 9});
    CHECK(d.layout.system_len == 5);
    CHECK(d.layout.text_len == 7);
    CHECK(d.layout.image_len == 2);
    CHECK(d.image_patches == p.image_patches);
}

}  // TEST_SUITE
