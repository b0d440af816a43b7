#include "doctest.h"

#include "imccd/decode.hpp"
#include "imccd/errors.hpp"
#include "imccd/oracle.hpp"
#include "test_support.hpp"

#include <cmath>
#include <set>

using namespace imccd;
using imccd::testing::random_prompt;
using imccd::testing::small_config;

namespace {

MatrixD mat(std::initializer_list<std::initializer_list<double>> rows) {
    MatrixD m(rows.size(), rows.begin()->size());
    std::size_t r = 0;
    for (const auto& row : rows) {
        std::size_t c = 0;
        for (double v : row) m(r, c++) = v;
        ++r;
    }
    return m;
}

Matrix fmat(std::initializer_list<std::initializer_list<float>> rows) {
    Matrix m(rows.size(), rows.begin()->size());
    std::size_t r = 0;
    for (const auto& row : rows) {
        std::size_t c = 0;
        for (float v : row) m(r, c++) = v;
        ++r;
    }
    return m;
}

std::vector<std::uint8_t> bits(const BinaryMatrix& m) { return {m.flat().begin(), m.flat().end()}; }

}  // namespace

TEST_SUITE("cmved") {

TEST_CASE("mask: entries at or above the block mean are significant") {
    CHECK(bits(build_cross_mask(mat({{0.1, 0.3}, {0.2, 0.4}})).block) == std::vector<std::uint8_t>{0, 1, 0, 1});
    CHECK(bits(build_cross_mask(mat({{0.7, 0.7}, {0.7, 0.7}})).block) == std::vector<std::uint8_t>{1, 1, 1, 1});
    CHECK(bits(build_cross_mask(mat({{5.0, -5.0}})).block) == std::vector<std::uint8_t>{1, 0});
    CHECK(build_cross_mask(MatrixD{}).block.empty());
}

TEST_CASE("mask: non-finite logits are rejected") {
    CHECK_THROWS_AS(build_cross_mask(mat({{1.0, std::nan("")}})), NumericError);
}

TEST_CASE("mask: global form only touches the cross window") {
    const TokenLayout layout{2, 3, 5};
    const auto m = build_cross_mask(mat({{1, 2, 3}, {3, 2, 1}, {0, 0, 9}}));
    const BinaryMatrix g = m.global(layout, 9, 5);
    for (std::size_t i = 0; i < 9; ++i)
        for (std::size_t j = 0; j < 9; ++j)
            if (!(i >= 5 && i < 8 && j >= 2 && j < 5)) CHECK(g(i, j) == 0);
    CHECK(g(5, 4) == 1);
    CHECK(g(7, 4) == 1);
    CHECK(g(7, 2) == 0);
    CHECK_THROWS_AS(m.global(layout, 9, 4), InternalError);
}

TEST_CASE("mean value vector averages image rows only") {
    const TokenLayout layout{1, 2, 2};
    const Matrix v = fmat({{9, 9}, {2, 0}, {0, 2}, {7, -7}});
    CHECK(mean_value_vector(v, layout) == std::vector<float>{1, 1});

    const TokenLayout one{1, 1, 2};
    const Matrix v1 = fmat({{9, 9}, {3, -4}, {1, 1}});
    CHECK(mean_value_vector(v1, one) == std::vector<float>{3, -4});
    CHECK_THROWS_AS(mean_value_vector(fmat({{1, 1}}), layout), InputError);
}

TEST_CASE("distortion with an empty mask is the plain attention output") {
    const MatrixD a = mat({{1, 0, 0}, {0.25, 0.75, 0}, {0.2, 0.3, 0.5}});
    const Matrix v = fmat({{1, 2}, {3, 4}, {5, 6}});
    const Matrix o = distorted_attention_output(a, v, BinaryMatrix(3, 3), std::vector<float>{100, 100});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 2; ++k) {
            double ref = 0.0;
            for (std::size_t j = 0; j < 3; ++j) ref += a(i, j) * v(j, k);
            CHECK(o(i, k) == float(ref));
        }
}

TEST_CASE("distortion worked example") {
    // columns: img1, img2, text; mean image value (1, 1)
    const MatrixD a = mat({{0.5, 0.3, 0.2}});
    const Matrix v = fmat({{2, 0}, {0, 2}, {1, 1}});
    BinaryMatrix m(1, 3);
    m(0, 0) = m(0, 1) = 1;
    const TokenLayout layout{0, 2, 1};
    const auto mu = mean_value_vector(v, layout);
    CHECK(mu == std::vector<float>{1, 1});
    const Matrix o = distorted_attention_output(a, v, m, mu);
    CHECK(o(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(o(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identical image values make distortion a no-op") {
    const MatrixD a = mat({{0.6, 0.4}});
    const Matrix v = fmat({{2, 3}, {2, 3}});
    BinaryMatrix m(1, 2, 1);
    const Matrix o = distorted_attention_output(a, v, m, mean_value_vector(v, {0, 2, 1}));
    const Matrix plain = distorted_attention_output(a, v, BinaryMatrix(1, 2), {{0, 0}});
    CHECK(o == plain);
}

TEST_CASE("no distorting layer leaves the branch bit-identical") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 31);
    const Prompt p = random_prompt(cfg, {2, 4, 6}, 32);
    DecoderSession s(w, p.layout);
    s.prefill(p.text_tokens, p.image_patches);
    DistortionConfig none;
    none.apply_layers = std::set<std::size_t>{};
    const auto pair = dual_branch_step(s, std::nullopt, none);
    CHECK(pair.original == pair.distorted);
    const auto pair2 = dual_branch_step(s, TokenId(3), none);
    CHECK(pair2.original == pair2.distorted);
}

TEST_CASE("prefix rows are identical across branches at every layer") {
    const ModelConfig cfg = small_config();
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ModelWeights w = random_weights(cfg, derive_seed(33, seed));
        const Prompt p = random_prompt(cfg, {2, 5, 6}, derive_seed(34, seed));
        DistortionConfig all;
        oracle::NaiveOptions plain, dist;
        dist.distortion = &all;
        const Matrix e = oracle::embed_sequence(w, p, std::vector<TokenId>{1, 2});
        const auto a = oracle::naive_forward(w, e, p.layout, plain);
        const auto b = oracle::naive_forward(w, e, p.layout, dist);
        for (std::size_t l = 0; l < cfg.n_layers; ++l)
            for (std::size_t r = 0; r < p.layout.post_image_begin(); ++r)
                for (std::size_t k = 0; k < cfg.d_model; ++k) CHECK(a.layer_inputs[l](r, k) == b.layer_inputs[l](r, k));
    }
}

TEST_CASE("distorted branch shares cached prefix keys and values") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 35);
    const Prompt p = random_prompt(cfg, {2, 4, 6}, 36);
    DecoderSession s(w, p.layout);
    s.prefill(p.text_tokens, p.image_patches);
    const KVCache child(s.cache(), p.layout.post_image_begin());
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
        for (std::size_t r = 0; r < p.layout.post_image_begin(); ++r) {
            CHECK(child.key(l, r).data() == s.cache().key(l, r).data());
            CHECK(child.value(l, r).data() == s.cache().value(l, r).data());
        }
}

TEST_CASE("distorted branch cost equals the post-image length") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 37);
    const Prompt p = random_prompt(cfg, {3, 6, 7}, 38);
    DecoderSession s(w, p.layout);
    s.prefill(p.text_tokens, p.image_patches);
    DistortionConfig all;
    for (std::size_t gen = 0; gen < 4; ++gen) {
        if (gen > 0) s.append(TokenId(gen));
        const auto before = s.distorted_cost().token_forwards;
        s.distorted_logits(all);
        const auto used = s.distorted_cost().token_forwards - before;
        CHECK(used == s.length() - p.layout.post_image_begin());
        CHECK(used < s.length());
    }
}

TEST_CASE("forced empty mask makes the fusion collapse to the original softmax") {
    const ModelConfig cfg = small_config();
    const ModelWeights w = random_weights(cfg, 39);
    const Prompt p = random_prompt(cfg, {2, 4, 6}, 40);
    DecoderSession s(w, p.layout);
    s.prefill(p.text_tokens, p.image_patches);
    DistortionConfig empty;
    empty.force_empty_mask = true;
    const auto pair = dual_branch_step(s, std::nullopt, empty);
    for (double alpha : {0.0, 0.5, 1.0, 3.0}) {
        const auto fused = fuse_logits(pair.original, pair.distorted, alpha);
        std::vector<double> l(pair.original.begin(), pair.original.end());
        const auto ref = softmax(l);
        for (std::size_t t = 0; t < ref.size(); ++t) CHECK(std::abs(fused[t] - ref[t]) <= 1e-6);
    }
}

TEST_CASE("locality is monotone in the distorted layer set") {
    const ModelConfig cfg = small_config();
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        const ModelWeights w = random_weights(cfg, derive_seed(41, seed));
        const Prompt p = random_prompt(cfg, {2, 4, 6}, derive_seed(42, seed));
        const Matrix e = oracle::embed_sequence(w, p, std::vector<TokenId>{5});
        Rng rng(seed);
        std::set<std::size_t> s1, s2;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const auto u = rng.below(3);
            if (u == 0) s1.insert(l);
            if (u <= 1) s2.insert(l);
        }
        DistortionConfig c1, c2;
        c1.apply_layers = s1;
        c2.apply_layers = s2;
        oracle::NaiveOptions o0, o1, o2;
        o1.distortion = &c1;
        o2.distortion = &c2;
        const auto f0 = oracle::naive_forward(w, e, p.layout, o0);
        const auto f1 = oracle::naive_forward(w, e, p.layout, o1);
        const auto f2 = oracle::naive_forward(w, e, p.layout, o2);
        for (std::size_t r = 0; r < e.rows(); ++r) {
            bool d1 = false, d2 = false;
            for (std::size_t k = 0; k < cfg.d_model; ++k) {
                d1 |= f1.final_hidden(r, k) != f0.final_hidden(r, k);
                d2 |= f2.final_hidden(r, k) != f0.final_hidden(r, k);
            }
            if (d1) CHECK(d2);
            if (r < p.layout.post_image_begin()) CHECK_FALSE(d2);
        }
    }
}

TEST_CASE("distortion config rejects layers beyond the model") {
    DistortionConfig c;
    c.apply_layers = std::set<std::size_t>{0, 9};
    CHECK_THROWS_AS(c.validate(6), ConfigError);
}

}  // TEST_SUITE
