#pragma once

// Cross-modal value-enhanced distortion: entries of the cross-modal attention
// block whose logit reaches the block mean are "significant"; in the distorted
// branch their value vectors are swapped for the dim-wise mean image value.

#include "imccd/model.hpp"

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <vector>

namespace imccd {

struct DistortionConfig {
    // Layers that distort; std::nullopt means every layer.
    std::optional<std::set<std::size_t>> apply_layers;
    bool apply_during_generation = true;
    // Test hook: pretend no entry is significant.
    bool force_empty_mask = false;

    bool applies_to(std::size_t layer) const {
        return !apply_layers || apply_layers->count(layer) != 0;
    }
    void validate(std::size_t n_layers) const;
};

struct CrossModalMask {
    BinaryMatrix block;  // query_rows x n

    // Zero-padded (seq x seq) form; block row r lands on sequence row first_row + r.
    BinaryMatrix global(const TokenLayout& layout, std::size_t seq_len, std::size_t first_row) const;
    double density() const;
};

// mask(i, j) = 1 iff cross_logits(i, j) >= mean(cross_logits). Empty input
// yields an empty mask.
CrossModalMask build_cross_mask(const MatrixD& cross_logits);

// Per-dimension mean over the image rows [m_b, m_b + n) of V.
std::vector<float> mean_value_vector(const Matrix& values, const TokenLayout& layout);

// O~ = (M . A) mu(V) + ((1 - M) . A) V, row by row.
Matrix distorted_attention_output(const MatrixD& weights, const Matrix& values, const BinaryMatrix& mask,
                                  std::span<const float> mean_value);

}  // namespace imccd
