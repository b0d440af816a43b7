#pragma once

// Content-driven attention refinement: attention logits recomputed under
// position indices that collapse every image token onto one index, blended
// into the cross-modal block (post-image queries x image keys) of the first
// `layers` decoder layers.

#include "imccd/model.hpp"

#include <cstddef>
#include <vector>

namespace imccd {

struct CdarConfig {
    double gamma = 0.2;
    std::size_t layers = 3;

    void validate(std::size_t n_layers) const;
    bool applies_to(std::size_t layer) const noexcept { return layer < layers; }
};

struct PositionMap {
    std::vector<Position> standard;
    std::vector<Position> refined;
};

// Refined index of sequence row `index` (0-based): system rows keep i+1, all
// image rows share m_b+1, later rows (query text, then generated tokens) are
// shifted down so that text indices stay contiguous.
Position refined_position(const TokenLayout& layout, std::size_t index);

std::vector<Position> refined_positions(const TokenLayout& layout, std::size_t n_generated);
PositionMap position_map(const TokenLayout& layout, std::size_t n_generated);

// True when (query, key) lies in the cross-modal block: query after the image,
// key inside the image.
inline bool in_cross_block(const TokenLayout& layout, std::size_t query, std::size_t key) noexcept {
    return query >= layout.post_image_begin() && layout.is_image(key);
}

// Square (seq x seq) logits under standard and refined positions. Entries of
// the cross-modal block become gamma * refined + (1 - gamma) * standard for
// layer_index < config.layers; everything else is copied unchanged.
MatrixD blend_cross_logits(const MatrixD& standard_logits, const MatrixD& refined_logits,
                           const CdarConfig& config, const TokenLayout& layout, std::size_t layer_index);

}  // namespace imccd
