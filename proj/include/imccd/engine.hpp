#pragma once

// Incremental forward pass of the toy decoder with a KV cache, optional CDAR
// logit refinement and optional CMVED value distortion.
//
// Block: h += Wo * Attn(rms(h)); h += W2 * gelu(W1 * rms(h) + b1) + b2.
// Logits: head^T * rms(h_last) + head_bias.

#include "imccd/cdar.hpp"
#include "imccd/cmved.hpp"
#include "imccd/model.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace imccd {

struct CostCounters {
    std::uint64_t token_forwards = 0;  // rows pushed through the full layer stack
    std::uint64_t attention_dots = 0;  // query-key dot products (all heads, all layers)
    std::uint64_t macs = 0;            // multiply-accumulates in projections, FFN and attention

    CostCounters& operator+=(const CostCounters& o) {
        token_forwards += o.token_forwards;
        attention_dots += o.attention_dots;
        macs += o.macs;
        return *this;
    }
    friend bool operator==(const CostCounters&, const CostCounters&) = default;
};

// Per-layer keys (standard and refined rotation) and values. A cache may share
// a read-only prefix with a parent cache; rows below the shared length are read
// from the parent and never rewritten.
class KVCache {
public:
    KVCache() = default;
    KVCache(std::size_t n_layers, std::size_t width);
    KVCache(const KVCache& parent, std::size_t shared_len);

    std::size_t n_layers() const noexcept { return layers_.size(); }
    std::size_t width() const noexcept { return width_; }
    std::size_t shared_len() const noexcept { return shared_len_; }
    std::size_t length(std::size_t layer) const { return shared_len_ + layers_[layer].keys.rows(); }
    std::size_t length() const { return layers_.empty() ? 0 : length(layers_.size() - 1); }

    std::span<const float> key(std::size_t layer, std::size_t row) const;
    std::span<const float> refined_key(std::size_t layer, std::size_t row) const;
    std::span<const float> value(std::size_t layer, std::size_t row) const;
    Position position(std::size_t row) const;

    void append(std::size_t layer, std::span<const float> key_rotated, std::span<const float> key_refined,
                std::span<const float> value, Position position);

private:
    struct LayerRows {
        Matrix keys, refined_keys, values;
    };
    const KVCache* parent_ = nullptr;
    std::size_t shared_len_ = 0;
    std::size_t width_ = 0;
    std::vector<LayerRows> layers_;
    std::vector<Position> positions_;  // local rows only
};

struct HeadTrace {
    Matrix q, k, v;  // new rows; q and k carry the standard rotation
    MatrixD logits;  // new rows x visible keys, after refinement; -inf above the diagonal
    MatrixD weights;
    Matrix output;                           // A V
    std::optional<Matrix> distorted_output;  // set when the layer distorts
    BinaryMatrix mask;                       // new rows x keys; empty when the layer does not distort
    std::vector<float> mean_value;
};

struct LayerTrace {
    Matrix hidden_in;
    std::vector<HeadTrace> heads;
    double mask_density = 0.0;      // mean over heads; 0 when the layer does not distort
    double cross_logit_mean = 0.0;  // mean refined logit over the cross block rows in this batch
};

struct AttentionTrace {
    std::size_t first_row = 0;
    std::vector<LayerTrace> layers;
    Matrix final_hidden;
};

struct AttentionContext {
    TokenLayout layout;
    std::optional<CdarConfig> cdar;
    const DistortionConfig* distortion = nullptr;  // null on the original branch
};

// One attention sublayer. `hidden` holds pre-norm layer inputs for sequence
// rows [first, first + hidden.rows()); `positions` are their standard
// positions. The cache must already hold exactly `first` rows for `layer`.
// Returns the concatenated head outputs (before Wo).
Matrix attention_forward(const ModelWeights& weights, std::size_t layer, const Matrix& hidden, std::size_t first,
                         std::span<const Position> positions, KVCache& cache, const AttentionContext& ctx,
                         LayerTrace* trace = nullptr, CostCounters* counters = nullptr);

// Runs all layers on rows [first, first + input.rows()) and returns the final
// hidden states (before the output norm).
Matrix forward_rows(const ModelWeights& weights, const Matrix& input, std::size_t first, KVCache& cache,
                    const AttentionContext& ctx, AttentionTrace* trace = nullptr, CostCounters* counters = nullptr);

// Residual updates shared by every forward path.
void attention_residual(const LayerWeights& lw, std::span<const float> attn, std::span<float> h);
void ffn_residual(const LayerWeights& lw, std::span<float> h);

std::vector<float> output_logits(const ModelWeights& weights, std::span<const float> hidden);

// Original-branch decoding state: owns the cache and the post-image layer-0
// inputs so that a distorted branch can be replayed over the suffix while
// reusing every system/image key and value.
class DecoderSession {
public:
    DecoderSession(const ModelWeights& weights, const TokenLayout& layout, std::optional<CdarConfig> cdar = {});

    // Returns logits for the last prompt row.
    std::vector<float> prefill(std::span<const TokenId> text_tokens, const Matrix& image_patches,
                               AttentionTrace* trace = nullptr);
    std::vector<float> prefill_embedded(const Matrix& embedded, AttentionTrace* trace = nullptr);

    // Feeds one generated token; returns logits for it.
    std::vector<float> append(TokenId token, AttentionTrace* trace = nullptr);

    // Replays rows [m_b + n, length()) with value distortion and returns the
    // distorted logits for the last row. The session itself is not modified.
    std::vector<float> distorted_logits(const DistortionConfig& config, AttentionTrace* trace = nullptr);

    std::size_t length() const { return cache_.length(); }
    std::size_t generated() const { return length() - layout_.prompt_len(); }
    const TokenLayout& layout() const { return layout_; }
    const KVCache& cache() const { return cache_; }
    const ModelWeights& weights() const { return *weights_; }
    const std::optional<CdarConfig>& cdar() const { return cdar_; }
    const CostCounters& original_cost() const { return original_cost_; }
    const CostCounters& distorted_cost() const { return distorted_cost_; }
    const std::vector<float>& last_logits() const { return last_logits_; }

private:
    const ModelWeights* weights_;
    TokenLayout layout_;
    std::optional<CdarConfig> cdar_;
    KVCache cache_;
    Matrix suffix_inputs_;
    std::vector<float> last_logits_;
    CostCounters original_cost_;
    CostCounters distorted_cost_;
};

}  // namespace imccd
