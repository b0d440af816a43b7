#include "imccd/cmved.hpp"

#include "imccd/errors.hpp"

#include <cmath>
#include <string>

namespace imccd {

void DistortionConfig::validate(std::size_t n_layers) const {
    if (!apply_layers) return;
    for (std::size_t l : *apply_layers)
        if (l >= n_layers)
            throw ConfigError("distortion layer " + std::to_string(l) + " outside [0, " +
                              std::to_string(n_layers) + ")");
}

CrossModalMask build_cross_mask(const MatrixD& cross_logits) {
    CrossModalMask mask{BinaryMatrix(cross_logits.rows(), cross_logits.cols())};
    if (cross_logits.empty()) return mask;
    double sum = 0.0;
    for (double v : cross_logits.flat()) {
        if (!std::isfinite(v)) throw NumericError("non-finite cross-modal logit");
        sum += v;
    }
    const double mean = sum / double(cross_logits.size());
    auto src = cross_logits.flat();
    auto dst = mask.block.flat();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] >= mean ? 1 : 0;
    return mask;
}

BinaryMatrix CrossModalMask::global(const TokenLayout& layout, std::size_t seq_len, std::size_t first_row) const {
    if (block.cols() != layout.image_len && !block.empty())
        throw InternalError("cross mask width differs from image token count");
    if (first_row < layout.post_image_begin() || first_row + block.rows() > seq_len)
        throw InternalError("cross mask rows fall outside the post-image range");
    BinaryMatrix g(seq_len, seq_len);
    for (std::size_t r = 0; r < block.rows(); ++r)
        for (std::size_t c = 0; c < block.cols(); ++c) g(first_row + r, layout.image_begin() + c) = block(r, c);
    return g;
}

double CrossModalMask::density() const {
    if (block.empty()) return 0.0;
    std::size_t ones = 0;
    for (auto b : block.flat()) ones += b;
    return double(ones) / double(block.size());
}

std::vector<float> mean_value_vector(const Matrix& values, const TokenLayout& layout) {
    if (values.rows() < layout.image_end())
        throw InputError("value matrix has " + std::to_string(values.rows()) + " rows, image ends at " +
                         std::to_string(layout.image_end()));
    std::vector<double> acc(values.cols(), 0.0);
    for (std::size_t r = layout.image_begin(); r < layout.image_end(); ++r)
        for (std::size_t k = 0; k < values.cols(); ++k) acc[k] += values(r, k);
    std::vector<float> mu(values.cols());
    for (std::size_t k = 0; k < values.cols(); ++k) mu[k] = float(acc[k] / double(layout.image_len));
    return mu;
}

Matrix distorted_attention_output(const MatrixD& weights, const Matrix& values, const BinaryMatrix& mask,
                                  std::span<const float> mean_value) {
    if (weights.cols() != values.rows() || mask.rows() != weights.rows() || mask.cols() != weights.cols() ||
        mean_value.size() != values.cols())
        throw InternalError("distorted_attention_output: shape mismatch");
    const std::size_t d = values.cols();
    Matrix out(weights.rows(), d);
    std::vector<double> acc(d);
    for (std::size_t i = 0; i < weights.rows(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        double masked_mass = 0.0;
        for (std::size_t j = 0; j < weights.cols(); ++j) {
            const double a = weights(i, j);
            if (a == 0.0) continue;
            if (mask(i, j)) {
                masked_mass += a;
                continue;
            }
            auto v = values.row(j);
            for (std::size_t k = 0; k < d; ++k) acc[k] += a * double(v[k]);
        }
        for (std::size_t k = 0; k < d; ++k) out(i, k) = float(masked_mass * double(mean_value[k]) + acc[k]);
    }
    return out;
}

}  // namespace imccd
