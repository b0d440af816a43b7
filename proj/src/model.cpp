#include "imccd/model.hpp"

#include "imccd/errors.hpp"

#include <cmath>
#include <string>

namespace imccd {

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || head_dim == 0 || n_layers == 0 || vocab_size == 0 ||
        ffn_dim == 0 || patch_dim == 0)
        throw ConfigError("model config fields must all be positive");
    if (n_heads * head_dim != d_model)
        throw ConfigError("n_heads * head_dim must equal d_model (" + std::to_string(n_heads) + " * " +
                          std::to_string(head_dim) + " != " + std::to_string(d_model) + ")");
    if (head_dim % 2 != 0) throw ConfigError("rotary embedding requires an even head_dim");
    if (!(rope_base > 0.0f) || !std::isfinite(rope_base)) throw ConfigError("rope_base must be positive");
}

namespace {

LayerWeights zero_layer(const ModelConfig& c) {
    LayerWeights l;
    l.attn_norm.assign(c.d_model, 1.0f);
    l.wq = Matrix(c.d_model, c.d_model);
    l.wk = Matrix(c.d_model, c.d_model);
    l.wv = Matrix(c.d_model, c.d_model);
    l.wo = Matrix(c.d_model, c.d_model);
    l.ffn_norm.assign(c.d_model, 1.0f);
    l.w1 = Matrix(c.d_model, c.ffn_dim);
    l.b1.assign(c.ffn_dim, 0.0f);
    l.w2 = Matrix(c.ffn_dim, c.d_model);
    l.b2.assign(c.d_model, 0.0f);
    return l;
}

void fill_gaussian(Matrix& m, Rng& rng, double stddev) {
    for (float& v : m.flat()) v = float(rng.normal() * stddev);
}

void require_shape(const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c)
        throw ConfigError(std::string("tensor ") + name + " has shape " + std::to_string(m.rows()) + "x" +
                          std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" +
                          std::to_string(c));
}

void require_len(const std::vector<float>& v, std::size_t n, const char* name) {
    if (v.size() != n)
        throw ConfigError(std::string("tensor ") + name + " has length " + std::to_string(v.size()) +
                          ", expected " + std::to_string(n));
}

}  // namespace

ModelWeights zero_weights(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    w.token_embedding = Matrix(config.vocab_size, config.d_model);
    w.patch_projector = Matrix(config.patch_dim, config.d_model);
    for (std::uint32_t i = 0; i < config.n_layers; ++i) w.layers.push_back(zero_layer(config));
    w.final_norm.assign(config.d_model, 1.0f);
    w.head = Matrix(config.d_model, config.vocab_size);
    w.head_bias.assign(config.vocab_size, 0.0f);
    return w;
}

ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed, double scale) {
    ModelWeights w = zero_weights(config);
    Rng rng(seed);
    const double d = config.d_model;
    fill_gaussian(w.token_embedding, rng, scale);
    fill_gaussian(w.patch_projector, rng, scale / std::sqrt(double(config.patch_dim)));
    for (auto& l : w.layers) {
        fill_gaussian(l.wq, rng, scale / std::sqrt(d));
        fill_gaussian(l.wk, rng, scale / std::sqrt(d));
        fill_gaussian(l.wv, rng, scale / std::sqrt(d));
        fill_gaussian(l.wo, rng, scale / std::sqrt(d));
        fill_gaussian(l.w1, rng, scale / std::sqrt(d));
        fill_gaussian(l.w2, rng, scale / std::sqrt(double(config.ffn_dim)));
    }
    fill_gaussian(w.head, rng, scale / std::sqrt(d));
    return w;
}

void check_weights(const ModelWeights& w) {
    const auto& c = w.config;
    c.validate();
    require_shape(w.token_embedding, c.vocab_size, c.d_model, "token_embedding");
    require_shape(w.patch_projector, c.patch_dim, c.d_model, "patch_projector");
    if (w.layers.size() != c.n_layers) throw ConfigError("layer count disagrees with n_layers");
    for (const auto& l : w.layers) {
        require_len(l.attn_norm, c.d_model, "attn_norm");
        require_shape(l.wq, c.d_model, c.d_model, "wq");
        require_shape(l.wk, c.d_model, c.d_model, "wk");
        require_shape(l.wv, c.d_model, c.d_model, "wv");
        require_shape(l.wo, c.d_model, c.d_model, "wo");
        require_len(l.ffn_norm, c.d_model, "ffn_norm");
        require_shape(l.w1, c.d_model, c.ffn_dim, "w1");
        require_len(l.b1, c.ffn_dim, "b1");
        require_shape(l.w2, c.ffn_dim, c.d_model, "w2");
        require_len(l.b2, c.d_model, "b2");
        if (!all_finite(l.attn_norm) || !all_finite(l.wq.flat()) || !all_finite(l.wk.flat()) ||
            !all_finite(l.wv.flat()) || !all_finite(l.wo.flat()) || !all_finite(l.ffn_norm) ||
            !all_finite(l.w1.flat()) || !all_finite(l.b1) || !all_finite(l.w2.flat()) ||
            !all_finite(l.b2))
            throw NumericError("non-finite layer weight");
    }
    require_len(w.final_norm, c.d_model, "final_norm");
    require_shape(w.head, c.d_model, c.vocab_size, "head");
    require_len(w.head_bias, c.vocab_size, "head_bias");
    if (!all_finite(w.token_embedding.flat()) || !all_finite(w.patch_projector.flat()) ||
        !all_finite(w.final_norm) || !all_finite(w.head.flat()) || !all_finite(w.head_bias))
        throw NumericError("non-finite model weight");
}

void TokenLayout::validate() const {
    if (image_len < 1) throw InputError("layout needs at least one image token");
    if (!(system_len > 0 && system_len < text_len))
        throw InputError("layout requires 0 < system_len < text_len (got system_len=" +
                         std::to_string(system_len) + ", text_len=" + std::to_string(text_len) + ")");
}

Matrix embed_inputs(const ModelWeights& weights, std::span<const TokenId> text_tokens,
                    const Matrix& image_patches, const TokenLayout& layout) {
    layout.validate();
    const auto& c = weights.config;
    if (text_tokens.size() != layout.text_len)
        throw InputError("expected " + std::to_string(layout.text_len) + " text tokens, got " +
                         std::to_string(text_tokens.size()));
    if (image_patches.rows() != layout.image_len)
        throw InputError("expected " + std::to_string(layout.image_len) + " image patches, got " +
                         std::to_string(image_patches.rows()));
    if (image_patches.cols() != c.patch_dim)
        throw InputError("patch width " + std::to_string(image_patches.cols()) + " != patch_dim " +
                         std::to_string(c.patch_dim));

    Matrix out(layout.prompt_len(), c.d_model);
    auto put_token = [&](std::size_t row, TokenId id) {
        if (id >= c.vocab_size) throw InputError("token id " + std::to_string(id) + " >= vocab_size");
        auto src = weights.token_embedding.row(id);
        std::copy(src.begin(), src.end(), out.row(row).begin());
    };
    std::size_t row = 0;
    for (std::size_t i = 0; i < layout.system_len; ++i) put_token(row++, text_tokens[i]);
    for (std::size_t p = 0; p < layout.image_len; ++p) matvec(image_patches.row(p), weights.patch_projector, out.row(row++));
    for (std::size_t i = layout.system_len; i < layout.text_len; ++i) put_token(row++, text_tokens[i]);
    return out;
}

void rope_rotate_row(std::span<float> row, Position position, double rope_base) {
    const std::size_t d = row.size();
    if (d % 2 != 0) throw ConfigError("rotary embedding requires an even dimension");
    for (std::size_t k = 0; k < d / 2; ++k) {
        const double theta = double(position) * std::pow(rope_base, -2.0 * double(k) / double(d));
        const double c = std::cos(theta);
        const double s = std::sin(theta);
        const double x0 = row[2 * k];
        const double x1 = row[2 * k + 1];
        row[2 * k] = float(x0 * c - x1 * s);
        row[2 * k + 1] = float(x0 * s + x1 * c);
    }
}

Matrix rope_apply(const Matrix& vectors, std::span<const Position> positions, double rope_base) {
    if (positions.size() != vectors.rows())
        throw InputError("rope_apply: " + std::to_string(positions.size()) + " positions for " +
                         std::to_string(vectors.rows()) + " rows");
    if (vectors.cols() % 2 != 0) throw ConfigError("rotary embedding requires an even dimension");
    Matrix out = vectors;
    for (std::size_t r = 0; r < out.rows(); ++r) rope_rotate_row(out.row(r), positions[r], rope_base);
    return out;
}

std::vector<Position> standard_positions(std::size_t seq_len) {
    std::vector<Position> p(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i) p[i] = Position(i + 1);
    return p;
}

}  // namespace imccd
