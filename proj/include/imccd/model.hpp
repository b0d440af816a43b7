#pragma once

// Toy decoder-only vision-language model: weights, prompt layout, embedding and
// rotary position embedding. The forward pass itself lives in engine.hpp.

#include "imccd/numeric.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace imccd {

using TokenId = std::uint32_t;
using Position = std::int64_t;

struct ModelConfig {
    std::uint32_t d_model = 64;
    std::uint32_t n_heads = 4;
    std::uint32_t head_dim = 16;
    std::uint32_t n_layers = 6;
    std::uint32_t vocab_size = 512;
    std::uint32_t ffn_dim = 128;
    std::uint32_t patch_dim = 16;
    float rope_base = 10000.0f;

    // Throws ConfigError on any violated invariant (including odd head_dim,
    // which rotary embedding cannot pair up).
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
    std::vector<float> attn_norm;  // d_model
    Matrix wq, wk, wv, wo;         // d_model x d_model
    std::vector<float> ffn_norm;   // d_model
    Matrix w1;                     // d_model x ffn_dim
    std::vector<float> b1;         // ffn_dim
    Matrix w2;                     // ffn_dim x d_model
    std::vector<float> b2;         // d_model

    friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct ModelWeights {
    ModelConfig config;
    Matrix token_embedding;  // vocab_size x d_model
    Matrix patch_projector;  // patch_dim x d_model
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;  // d_model
    Matrix head;                    // d_model x vocab_size
    std::vector<float> head_bias;   // vocab_size

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

// All-zero tensors with unit norm gains.
ModelWeights zero_weights(const ModelConfig& config);

// Gaussian init, std = scale / sqrt(fan_in); norm gains 1, biases 0.
ModelWeights random_weights(const ModelConfig& config, std::uint64_t seed, double scale = 1.0);

// Throws ConfigError when tensor shapes disagree with the config and
// NumericError when any entry is non-finite.
void check_weights(const ModelWeights& weights);

// Segmentation of the concatenated prompt [system text | image | query text].
struct TokenLayout {
    std::size_t system_len = 0;  // m_b
    std::size_t image_len = 0;   // n
    std::size_t text_len = 0;    // m, system + query

    std::size_t prompt_len() const noexcept { return image_len + text_len; }
    std::size_t image_begin() const noexcept { return system_len; }
    std::size_t image_end() const noexcept { return system_len + image_len; }
    // First row of the cross-modal query range (post-image text, then generated tokens).
    std::size_t post_image_begin() const noexcept { return image_end(); }
    std::size_t query_len() const noexcept { return text_len - system_len; }

    bool is_image(std::size_t index) const noexcept {
        return index >= image_begin() && index < image_end();
    }

    void validate() const;

    friend bool operator==(const TokenLayout&, const TokenLayout&) = default;
};

// Rows follow [T_{0:m_b}, X, T_{m_b+1:m}]; patches are projected linearly.
Matrix embed_inputs(const ModelWeights& weights, std::span<const TokenId> text_tokens,
                    const Matrix& image_patches, const TokenLayout& layout);

// Rotates dimension pairs (2k, 2k+1) of each row by pos * base^(-2k/d).
Matrix rope_apply(const Matrix& vectors, std::span<const Position> positions, double rope_base);
void rope_rotate_row(std::span<float> row, Position position, double rope_base);

// 1-based standard positions [1, seq].
std::vector<Position> standard_positions(std::size_t seq_len);

// Binary weight file, little endian: "IMCD", u32 version, seven u32 config
// fields, f32 rope_base, then every tensor as f32 in declaration order.
inline constexpr std::uint32_t kWeightFileVersion = 1;
void save_weights(const ModelWeights& weights, const std::filesystem::path& path);
ModelWeights load_weights(const std::filesystem::path& path);
std::size_t weight_file_size(const ModelConfig& config);

}  // namespace imccd
