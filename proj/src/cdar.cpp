#include "imccd/cdar.hpp"

#include "imccd/errors.hpp"

#include <string>

namespace imccd {

void CdarConfig::validate(std::size_t n_layers) const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("CDAR gamma must lie in [0, 1]");
    if (layers > n_layers)
        throw ConfigError("CDAR layer count " + std::to_string(layers) + " exceeds model depth " +
                          std::to_string(n_layers));
}

Position refined_position(const TokenLayout& layout, std::size_t index) {
    if (index < layout.system_len) return Position(index + 1);
    if (index < layout.image_end()) return Position(layout.system_len + 1);
    return Position(index) - Position(layout.image_len) + 2;
}

std::vector<Position> refined_positions(const TokenLayout& layout, std::size_t n_generated) {
    layout.validate();
    const std::size_t seq = layout.prompt_len() + n_generated;
    std::vector<Position> p(seq);
    for (std::size_t i = 0; i < seq; ++i) p[i] = refined_position(layout, i);
    return p;
}

PositionMap position_map(const TokenLayout& layout, std::size_t n_generated) {
    return {standard_positions(layout.prompt_len() + n_generated), refined_positions(layout, n_generated)};
}

MatrixD blend_cross_logits(const MatrixD& standard_logits, const MatrixD& refined_logits,
                           const CdarConfig& config, const TokenLayout& layout, std::size_t layer_index) {
    if (standard_logits.rows() != refined_logits.rows() || standard_logits.cols() != refined_logits.cols())
        throw InternalError("blend_cross_logits: logits shape mismatch");
    MatrixD out = standard_logits;
    if (!config.applies_to(layer_index)) return out;
    const double g = config.gamma;
    for (std::size_t q = layout.post_image_begin(); q < out.rows(); ++q)
        for (std::size_t k = layout.image_begin(); k < layout.image_end() && k < out.cols(); ++k)
            out(q, k) = g * refined_logits(q, k) + (1.0 - g) * standard_logits(q, k);
    return out;
}

}  // namespace imccd
