#include "doctest.h"

#include "imccd/engine.hpp"
#include "imccd/errors.hpp"
#include "imccd/oracle.hpp"
#include "test_support.hpp"

#include <cmath>
#include <fstream>

using namespace imccd;
using imccd::testing::random_matrix;
using imccd::testing::random_prompt;
using imccd::testing::small_config;

TEST_SUITE("model") {

TEST_CASE("embedding rows follow [system | image | query] order") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 3);
    const TokenLayout layout{2, 3, 5};
    const std::vector<TokenId> text{10, 11, 12, 13, 14};
    const Matrix patches = random_matrix(3, cfg.patch_dim, 5);
    const Matrix e = embed_inputs(w, text, patches, layout);
    REQUIRE(e.rows() == 8);

    auto token_row = [&](TokenId t) { return std::vector<float>(w.token_embedding.row(t).begin(), w.token_embedding.row(t).end()); };
    auto patch_row = [&](std::size_t r) {
        std::vector<float> out(cfg.d_model);
        matvec(patches.row(r), w.patch_projector, out);
        return out;
    };
    auto row = [&](std::size_t r) { return std::vector<float>(e.row(r).begin(), e.row(r).end()); };
    CHECK(row(0) == token_row(10));
    CHECK(row(1) == token_row(11));
    CHECK(row(2) == patch_row(0));
    CHECK(row(3) == patch_row(1));
    CHECK(row(4) == patch_row(2));
    CHECK(row(5) == token_row(12));
    CHECK(row(7) == token_row(14));

    CHECK(layout.image_begin() == 2);
    CHECK(layout.image_end() == 5);
    CHECK(layout.prompt_len() == e.rows());
    CHECK(layout.query_len() == 3);
}

TEST_CASE("zero patch projects to the zero vector") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 4);
    const Matrix e = embed_inputs(w, std::vector<TokenId>{1, 2}, Matrix(1, cfg.patch_dim), TokenLayout{1, 1, 2});
    for (float v : e.row(1)) CHECK(v == 0.0f);
}

TEST_CASE("layout validation rejects degenerate segments") {
    CHECK_THROWS_AS(TokenLayout({0, 2, 3}).validate(), InputError);
    CHECK_THROWS_AS(TokenLayout({2, 0, 3}).validate(), InputError);
    CHECK_THROWS_AS(TokenLayout({3, 2, 3}).validate(), InputError);
    CHECK_NOTHROW(TokenLayout({1, 1, 2}).validate());
}

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.head_dim = 15;
    c.n_heads = 1;
    c.d_model = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("rope: position zero is the identity") {
    const Matrix v = random_matrix(3, 16, 1);
    const std::vector<Position> pos{0, 0, 0};
    CHECK(rope_apply(v, pos, 10000.0) == v);
}

TEST_CASE("rope: closed form for d=2") {
    Matrix v(1, 2);
    v(0, 0) = 1.0f;
    const std::vector<Position> pos{1};
    const Matrix r = rope_apply(v, pos, 10000.0);
    CHECK(r(0, 0) == doctest::Approx(std::cos(1.0)).epsilon(1e-7));
    CHECK(r(0, 1) == doctest::Approx(std::sin(1.0)).epsilon(1e-7));
}

TEST_CASE("rope: dot products depend only on relative position") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Matrix q = random_matrix(1, 16, derive_seed(seed, 1));
        const Matrix k = random_matrix(1, 16, derive_seed(seed, 2));
        const Position pq = Position(rng.below(40)), pk = Position(rng.below(40));
        const Position shift = Position(rng.below(100)) + 1;
        const std::vector<Position> a{pq}, b{pk}, as{pq + shift}, bs{pk + shift};
        const double d0 = dot(rope_apply(q, a, 10000.0).row(0), rope_apply(k, b, 10000.0).row(0));
        const double d1 = dot(rope_apply(q, as, 10000.0).row(0), rope_apply(k, bs, 10000.0).row(0));
        CHECK(std::abs(d0 - d1) <= 1e-5);
    }
}

TEST_CASE("attention: singleton query attends to itself") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 9);
    KVCache cache(cfg.n_layers, cfg.d_model);
    const AttentionContext ctx{TokenLayout{1, 1, 2}, std::nullopt, nullptr};
    LayerTrace trace;
    const Matrix hidden = random_matrix(1, cfg.d_model, 10);
    const std::vector<Position> pos{1};
    const Matrix out = attention_forward(w, 0, hidden, 0, pos, cache, ctx, &trace);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto& ht = trace.heads[h];
        REQUIRE(ht.weights.rows() == 1);
        CHECK(ht.weights(0, 0) == 1.0);
        for (std::size_t k = 0; k < cfg.head_dim; ++k) CHECK(out(0, h * cfg.head_dim + k) == ht.v(0, k));
    }
}

TEST_CASE("attention: identical keys share the weight evenly") {
    ModelConfig cfg = small_config();
    ModelWeights w = random_weights(cfg, 11);
    for (auto& lw : w.layers) std::fill(lw.wk.flat().begin(), lw.wk.flat().end(), 0.0f);
    KVCache cache(cfg.n_layers, cfg.d_model);
    const AttentionContext ctx{TokenLayout{1, 1, 2}, std::nullopt, nullptr};
    LayerTrace trace;
    const std::vector<Position> pos{1, 2};
    attention_forward(w, 0, random_matrix(2, cfg.d_model, 12), 0, pos, cache, ctx, &trace);
    for (const auto& ht : trace.heads) {
        CHECK(ht.weights(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(ht.weights(1, 1) == doctest::Approx(0.5).epsilon(1e-12));
    }
}

TEST_CASE("attention rows are stochastic and causal") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 13);
    const Prompt p = random_prompt(cfg, {2, 4, 6}, 14);
    DecoderSession s(w, p.layout);
    AttentionTrace trace;
    s.prefill(p.text_tokens, p.image_patches, &trace);
    for (const auto& lt : trace.layers)
        for (const auto& ht : lt.heads)
            for (std::size_t i = 0; i < ht.weights.rows(); ++i) {
                double sum = 0.0;
                for (std::size_t j = 0; j < ht.weights.cols(); ++j) {
                    sum += ht.weights(i, j);
                    if (j > i) CHECK(ht.weights(i, j) == 0.0);
                }
                CHECK(std::abs(sum - 1.0) <= 1e-6);
            }
}

TEST_CASE("causality: later inputs never change earlier outputs") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 15);
    const Prompt p = random_prompt(cfg, {2, 3, 6}, 16);
    Prompt q = p;
    q.text_tokens.back() = (q.text_tokens.back() + 1) % cfg.vocab_size;
    oracle::NaiveOptions o;
    const auto a = oracle::naive_forward(w, oracle::embed_sequence(w, p, {}), p.layout, o);
    const auto b = oracle::naive_forward(w, oracle::embed_sequence(w, q, {}), q.layout, o);
    const std::size_t last = p.layout.prompt_len() - 1;
    for (std::size_t r = 0; r < last; ++r)
        for (std::size_t k = 0; k < cfg.d_model; ++k) CHECK(a.final_hidden(r, k) == b.final_hidden(r, k));
    bool changed = false;
    for (std::size_t k = 0; k < cfg.d_model; ++k) changed |= a.final_hidden(last, k) != b.final_hidden(last, k);
    CHECK(changed);
}

TEST_CASE("uniform head bias over zero weights gives uniform logits") {
    ModelConfig cfg = small_config();
    ModelWeights w = zero_weights(cfg);
    std::fill(w.head_bias.begin(), w.head_bias.end(), 0.25f);
    const Prompt p = random_prompt(cfg, {1, 2, 3}, 17);
    DecoderSession s(w, p.layout);
    const auto logits = s.prefill(p.text_tokens, p.image_patches);
    for (float v : logits) CHECK(v == 0.25f);
}

TEST_CASE("forward is deterministic") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 18);
    const Prompt p = random_prompt(cfg, {2, 4, 5}, 19);
    DecoderSession a(w, p.layout), b(w, p.layout);
    CHECK(a.prefill(p.text_tokens, p.image_patches) == b.prefill(p.text_tokens, p.image_patches));
    CHECK(a.append(5) == b.append(5));
}

TEST_CASE("cached decoding matches full recomputation") {
    const ModelConfig cfg = small_config();
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const ModelWeights w = random_weights(cfg, derive_seed(20, seed));
        const Prompt p = random_prompt(cfg, {2, 3, 4}, derive_seed(21, seed));
        DecoderSession s(w, p.layout);
        std::vector<TokenId> gen;
        std::vector<float> cached = s.prefill(p.text_tokens, p.image_patches);
        for (int step = 0; step < 5; ++step) {
            const auto full = oracle::naive_forward(w, oracle::embed_sequence(w, p, gen), p.layout, {});
            const auto ref = output_logits(w, full.final_hidden.row(full.final_hidden.rows() - 1));
            for (std::size_t t = 0; t < ref.size(); ++t) CHECK(oracle::within_tolerance(cached[t], ref[t]));
            const TokenId next = TokenId((step * 7 + seed) % cfg.vocab_size);
            gen.push_back(next);
            cached = s.append(next);
        }
    }
}

TEST_CASE("weight files round-trip losslessly") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 22);
    const auto dir = imccd::testing::scratch_dir("weights_rt");
    save_weights(w, dir / "w.bin");
    CHECK(load_weights(dir / "w.bin") == w);
    CHECK(std::filesystem::file_size(dir / "w.bin") == weight_file_size(cfg));
}

TEST_CASE("weight file size for the default config") {
    // 40 header bytes plus 265664 f32 values, counted by hand from the tensor list.
    CHECK(weight_file_size(ModelConfig{}) == 1062696);
}

TEST_CASE("corrupted magic is a format error") {
    const auto dir = imccd::testing::scratch_dir("weights_bad");
    save_weights(random_weights(small_config(), 23), dir / "w.bin");
    {
        std::fstream f(dir / "w.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("XMCD", 4);
    }
    CHECK_THROWS_AS(load_weights(dir / "w.bin"), FormatError);
    save_weights(random_weights(small_config(), 23), dir / "w.bin");
    std::filesystem::resize_file(dir / "w.bin", 100);
    CHECK_THROWS_AS(load_weights(dir / "w.bin"), FormatError);
}

TEST_CASE("non-finite weights are rejected") {
    ModelWeights w = random_weights(small_config(), 24);
    w.layers[1].wq(0, 0) = std::nanf("");
    CHECK_THROWS_AS(check_weights(w), NumericError);
}

}  // TEST_SUITE
