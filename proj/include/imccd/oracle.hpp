#pragma once

// Brute-force references. Everything here recomputes the full sequence from
// the embeddings on every call: no cache, no prefix sharing, dense masks.

#include "imccd/decode.hpp"

#include <optional>
#include <string>
#include <vector>

namespace imccd::oracle {

inline constexpr double kRelTolerance = 1e-6;
inline constexpr double kAbsFloor = 1e-8;

// |a - b| <= max(rel * |b|, abs_floor)
bool within_tolerance(double a, double b, double rel = kRelTolerance, double abs_floor = kAbsFloor);

enum class PositionVariant {
    standard,  // every row at its 1-based index
    refined,   // every row at its collapsed-image index
    removed,   // cross-modal logits use unrotated queries and keys
};
std::string_view to_string(PositionVariant v);

struct NaiveOptions {
    std::optional<CdarConfig> cdar;
    const DistortionConfig* distortion = nullptr;
    PositionVariant variant = PositionVariant::standard;
    bool keep_weights = false;
};

struct NaiveForward {
    std::vector<Matrix> layer_inputs;  // per layer, all rows
    Matrix final_hidden;
    std::vector<std::vector<MatrixD>> weights;  // [layer][head], when kept
    std::vector<std::vector<BinaryMatrix>> masks;  // [layer][head] global masks, when kept
    CostCounters cost;
};

// One attention sublayer over every row of `hidden` (pre-norm inputs); returns
// concatenated head outputs.
Matrix naive_attention(const ModelWeights& weights, std::size_t layer, const Matrix& hidden, const TokenLayout& layout,
                       const NaiveOptions& options, std::vector<MatrixD>* head_weights = nullptr,
                       std::vector<BinaryMatrix>* head_masks = nullptr);

NaiveForward naive_forward(const ModelWeights& weights, const Matrix& embedded, const TokenLayout& layout,
                           const NaiveOptions& options);

// Embeds prompt + generated tokens.
Matrix embed_sequence(const ModelWeights& weights, const Prompt& prompt, std::span<const TokenId> generated);

struct NaiveStep {
    std::vector<float> original;
    std::vector<float> distorted;
    NaiveForward original_forward;
    NaiveForward distorted_forward;
};

// Both branches as independent full forwards over prompt + `generated`.
NaiveStep naive_double_forward(const ModelWeights& weights, const Prompt& prompt, std::span<const TokenId> generated,
                               const DecodeConfig& config);

struct Divergence {
    std::size_t step = 0;
    std::string branch;  // "original" or "distorted"
    std::optional<std::size_t> layer;  // unset for the output logits
    std::size_t position = 0;          // sequence row, or vocab index for logits
    double expected = 0.0;
    double actual = 0.0;
};

struct ComparisonReport {
    std::string label;
    double max_abs_diff = 0.0;
    double max_rel_diff = 0.0;
    std::vector<double> per_layer_max_rel;  // hidden-state comparison, per layer
    std::size_t steps = 0;
    std::size_t compared_values = 0;
    bool tokens_match = true;
    std::optional<Divergence> first_divergence;
    CostCounters engine_cost;  // both branches
    CostCounters oracle_cost;
    bool pass = true;
};

// Runs the optimized generation step by step and recomputes every step with
// naive_double_forward, comparing per-layer hidden states and both logit vectors.
ComparisonReport compare_generation(const ModelWeights& weights, const Prompt& prompt, const DecodeConfig& config,
                                    std::string label = {});

// Zeroes masked entries and renormalizes each row. A row whose mass is fully
// masked falls back to uniform over its unmasked visible entries (j <= i for
// square input); throws NumericError when none remain.
MatrixD ablation_attention_mask(const MatrixD& weights, const BinaryMatrix& mask);

struct AttentionMass {
    double first_half = 0.0;   // mean over layers and heads of the summed weight on the first half of image tokens
    double second_half = 0.0;
    std::vector<double> per_token;  // mean weight per image token
};

// Attention from the last row to the image tokens, averaged over `layers`
// (all layers when empty) and all heads.
AttentionMass attention_mass(const std::vector<std::vector<MatrixD>>& weights, const TokenLayout& layout,
                             std::size_t row, const std::vector<std::size_t>& layers = {});
AttentionMass attention_mass(const AttentionTrace& trace, const TokenLayout& layout,
                             const std::vector<std::size_t>& layers = {});

struct PositionAblation {
    AttentionMass standard;
    AttentionMass removed;
    AttentionMass refined;
};

PositionAblation ablation_no_position(const ModelWeights& weights, const Prompt& prompt);

// Positions used for query/key rotation under a variant; nullopt marks an
// image key that is left unrotated in cross-modal logits.
std::vector<std::optional<Position>> variant_key_positions(const TokenLayout& layout, std::size_t seq,
                                                           PositionVariant v);

}  // namespace imccd::oracle
