#include "imccd/engine.hpp"

#include "imccd/errors.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace imccd {

KVCache::KVCache(std::size_t n_layers, std::size_t width) : width_(width), layers_(n_layers) {}

KVCache::KVCache(const KVCache& parent, std::size_t shared_len)
    : parent_(&parent), shared_len_(shared_len), width_(parent.width_), layers_(parent.layers_.size()) {
    for (std::size_t l = 0; l < parent.n_layers(); ++l)
        if (parent.length(l) < shared_len)
            throw InternalError("shared prefix longer than the parent cache at layer " + std::to_string(l));
}

std::span<const float> KVCache::key(std::size_t layer, std::size_t row) const {
    if (row < shared_len_) return parent_->key(layer, row);
    return layers_[layer].keys.row(row - shared_len_);
}

std::span<const float> KVCache::refined_key(std::size_t layer, std::size_t row) const {
    if (row < shared_len_) return parent_->refined_key(layer, row);
    return layers_[layer].refined_keys.row(row - shared_len_);
}

std::span<const float> KVCache::value(std::size_t layer, std::size_t row) const {
    if (row < shared_len_) return parent_->value(layer, row);
    return layers_[layer].values.row(row - shared_len_);
}

Position KVCache::position(std::size_t row) const {
    if (row < shared_len_) return parent_->position(row);
    return positions_.at(row - shared_len_);
}

void KVCache::append(std::size_t layer, std::span<const float> key_rotated, std::span<const float> key_refined,
                     std::span<const float> value, Position position) {
    if (key_rotated.size() != width_ || key_refined.size() != width_ || value.size() != width_)
        throw InternalError("KVCache::append width mismatch");
    auto& rows = layers_.at(layer);
    const std::size_t local = rows.keys.rows();
    if (local == positions_.size()) {
        positions_.push_back(position);
    } else if (positions_.at(local) != position) {
        throw InternalError("KVCache::append position disagrees with earlier layers");
    }
    if (layer > 0 && length(layer) >= length(layer - 1))
        throw InternalError("KVCache::append out of layer order");
    rows.keys.append_row(key_rotated);
    rows.refined_keys.append_row(key_refined);
    rows.values.append_row(value);
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void rotate_heads(std::span<float> row, std::size_t n_heads, std::size_t head_dim, Position pos, double base) {
    for (std::size_t h = 0; h < n_heads; ++h) rope_rotate_row(row.subspan(h * head_dim, head_dim), pos, base);
}

// Threshold groups for the significance mask: all post-image prompt rows form
// one block; every generated row is its own block.
struct MaskGroup {
    std::size_t begin;  // batch-relative
    std::size_t end;
};

std::vector<MaskGroup> mask_groups(const TokenLayout& layout, std::size_t first, std::size_t rows,
                                   bool during_generation) {
    std::vector<MaskGroup> groups;
    const std::size_t post = layout.post_image_begin();
    const std::size_t prompt = layout.prompt_len();
    const std::size_t last = first + rows;
    if (first < prompt && last > post) {
        if (first > post || last < prompt)
            throw InternalError("distortion needs the full post-image prompt block in one batch");
        groups.push_back({post - first, prompt - first});
    }
    if (during_generation)
        for (std::size_t idx = std::max(first, prompt); idx < last; ++idx) groups.push_back({idx - first, idx - first + 1});
    return groups;
}

}  // namespace

Matrix attention_forward(const ModelWeights& weights, std::size_t layer, const Matrix& hidden, std::size_t first,
                         std::span<const Position> positions, KVCache& cache, const AttentionContext& ctx,
                         LayerTrace* trace, CostCounters* counters) {
    const auto& cfg = weights.config;
    const std::size_t d = cfg.d_model;
    const std::size_t n_heads = cfg.n_heads;
    const std::size_t hd = cfg.head_dim;
    const std::size_t rows = hidden.rows();
    const double base = cfg.rope_base;
    const auto& lw = weights.layers.at(layer);
    const TokenLayout& layout = ctx.layout;

    if (cache.length(layer) != first)
        throw InternalError("cache holds " + std::to_string(cache.length(layer)) + " rows at layer " +
                            std::to_string(layer) + ", expected " + std::to_string(first));
    if (positions.size() != rows) throw InternalError("position count differs from row count");

    const bool cdar_on = ctx.cdar && ctx.cdar->applies_to(layer);
    const bool distort = ctx.distortion && ctx.distortion->applies_to(layer);

    Matrix q_std(rows, d), q_ref(rows, d), v_new(rows, d), k_std(rows, d);
    std::vector<float> normed(d), k_raw(d), k_ref(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t idx = first + r;
        rms_norm(hidden.row(r), lw.attn_norm, normed);
        matvec(normed, lw.wq, q_std.row(r));
        matvec(normed, lw.wk, k_raw);
        matvec(normed, lw.wv, v_new.row(r));
        const Position ref_pos = refined_position(layout, idx);
        std::copy(q_std.row(r).begin(), q_std.row(r).end(), q_ref.row(r).begin());
        rotate_heads(q_std.row(r), n_heads, hd, positions[r], base);
        rotate_heads(q_ref.row(r), n_heads, hd, ref_pos, base);
        std::copy(k_raw.begin(), k_raw.end(), k_std.row(r).begin());
        std::copy(k_raw.begin(), k_raw.end(), k_ref.begin());
        rotate_heads(k_std.row(r), n_heads, hd, positions[r], base);
        rotate_heads(k_ref, n_heads, hd, ref_pos, base);
        cache.append(layer, k_std.row(r), k_ref, v_new.row(r), positions[r]);
    }

    const double scale = 1.0 / std::sqrt(double(hd));
    const std::size_t key_len = first + rows;
    Matrix out(rows, d);
    std::vector<MaskGroup> groups;
    if (distort && !ctx.distortion->force_empty_mask)
        groups = mask_groups(layout, first, rows, ctx.distortion->apply_during_generation);

    if (trace) {
        trace->heads.assign(n_heads, HeadTrace{});
        trace->mask_density = 0.0;
        trace->cross_logit_mean = 0.0;
    }
    double cross_sum = 0.0;
    std::size_t cross_count = 0;

    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        MatrixD logits(rows, key_len, kNegInf);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t idx = first + r;
            auto q = q_std.row(r).subspan(off, hd);
            for (std::size_t j = 0; j <= idx; ++j) logits(r, j) = dot(q, cache.key(layer, j).subspan(off, hd)) * scale;
            if (counters) {
                counters->attention_dots += idx + 1;
                counters->macs += 2 * (idx + 1) * hd;
            }
            if (cdar_on && idx >= layout.post_image_begin()) {
                const double g = ctx.cdar->gamma;
                auto qr = q_ref.row(r).subspan(off, hd);
                for (std::size_t j = layout.image_begin(); j < layout.image_end(); ++j) {
                    const double refined = dot(qr, cache.refined_key(layer, j).subspan(off, hd)) * scale;
                    logits(r, j) = g * refined + (1.0 - g) * logits(r, j);
                }
                if (counters) {
                    counters->attention_dots += layout.image_len;
                    counters->macs += layout.image_len * hd;
                }
            }
            if (idx >= layout.post_image_begin())
                for (std::size_t j = layout.image_begin(); j < layout.image_end(); ++j) {
                    cross_sum += logits(r, j);
                    ++cross_count;
                }
        }

        BinaryMatrix mask(rows, key_len, 0);
        for (const auto& g : groups) {
            MatrixD block(g.end - g.begin, layout.image_len);
            for (std::size_t r = g.begin; r < g.end; ++r)
                for (std::size_t c = 0; c < layout.image_len; ++c) block(r - g.begin, c) = logits(r, layout.image_begin() + c);
            const CrossModalMask m = build_cross_mask(block);
            for (std::size_t r = g.begin; r < g.end; ++r)
                for (std::size_t c = 0; c < layout.image_len; ++c) mask(r, layout.image_begin() + c) = m.block(r - g.begin, c);
        }

        std::vector<float> mu;
        if (distort) {
            std::vector<double> acc(hd, 0.0);
            for (std::size_t j = layout.image_begin(); j < layout.image_end(); ++j) {
                auto v = cache.value(layer, j).subspan(off, hd);
                for (std::size_t k = 0; k < hd; ++k) acc[k] += v[k];
            }
            mu.resize(hd);
            for (std::size_t k = 0; k < hd; ++k) mu[k] = float(acc[k] / double(layout.image_len));
        }

        HeadTrace* ht = trace ? &trace->heads[h] : nullptr;
        if (ht) {
            ht->logits = logits;
            ht->weights = MatrixD(rows, key_len, 0.0);
            ht->output = Matrix(rows, hd);
            if (distort) {
                ht->distorted_output = Matrix(rows, hd);
                ht->mask = mask;
                ht->mean_value = mu;
            }
        }

        std::vector<double> acc(hd), acc_masked(hd);
        for (std::size_t r = 0; r < rows; ++r) {
            const std::vector<double> a = softmax(logits.row(r));
            std::fill(acc.begin(), acc.end(), 0.0);
            std::fill(acc_masked.begin(), acc_masked.end(), 0.0);
            double masked_mass = 0.0;
            for (std::size_t j = 0; j < a.size(); ++j) {
                if (a[j] == 0.0) continue;
                auto v = cache.value(layer, j).subspan(off, hd);
                if (mask(r, j)) {
                    masked_mass += a[j];
                    for (std::size_t k = 0; k < hd; ++k) acc_masked[k] += a[j] * double(v[k]);
                } else {
                    for (std::size_t k = 0; k < hd; ++k) acc[k] += a[j] * double(v[k]);
                }
            }
            for (std::size_t k = 0; k < hd; ++k) {
                const float distorted = distort ? float(masked_mass * double(mu[k]) + acc[k]) : 0.0f;
                const float plain = masked_mass == 0.0 ? float(acc[k]) : float(acc[k] + acc_masked[k]);
                out(r, off + k) = distort ? distorted : plain;
                if (ht) {
                    ht->output(r, k) = plain;
                    if (distort) (*ht->distorted_output)(r, k) = distorted;
                }
            }
            if (ht) std::copy(a.begin(), a.end(), ht->weights.row(r).begin());
        }
        if (trace && distort) {
            std::size_t ones = 0, total = 0;
            for (const auto& g : groups) {
                for (std::size_t r = g.begin; r < g.end; ++r)
                    for (std::size_t j = layout.image_begin(); j < layout.image_end(); ++j) ones += mask(r, j);
                total += (g.end - g.begin) * layout.image_len;
            }
            trace->mask_density += total ? double(ones) / double(total) / double(n_heads) : 0.0;
        }
        if (ht) {
            ht->q = Matrix(rows, hd);
            ht->k = Matrix(rows, hd);
            ht->v = Matrix(rows, hd);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t k = 0; k < hd; ++k) {
                    ht->q(r, k) = q_std(r, off + k);
                    ht->k(r, k) = k_std(r, off + k);
                    ht->v(r, k) = v_new(r, off + k);
                }
        }
    }
    if (trace && cross_count) trace->cross_logit_mean = cross_sum / double(cross_count);
    if (counters) counters->macs += rows * 3 * d * d;
    return out;
}

void ffn_residual(const LayerWeights& lw, std::span<float> h) {
    const std::size_t d = h.size();
    std::vector<float> normed(d), up(lw.b1.size()), down(d);
    rms_norm(h, lw.ffn_norm, normed);
    matvec(normed, lw.w1, up);
    for (std::size_t i = 0; i < up.size(); ++i) up[i] = gelu(up[i] + lw.b1[i]);
    matvec(up, lw.w2, down);
    for (std::size_t i = 0; i < d; ++i) h[i] += down[i] + lw.b2[i];
}

void attention_residual(const LayerWeights& lw, std::span<const float> attn, std::span<float> h) {
    std::vector<float> proj(h.size());
    matvec(attn, lw.wo, proj);
    for (std::size_t i = 0; i < h.size(); ++i) h[i] += proj[i];
}

Matrix forward_rows(const ModelWeights& weights, const Matrix& input, std::size_t first, KVCache& cache,
                    const AttentionContext& ctx, AttentionTrace* trace, CostCounters* counters) {
    const auto& cfg = weights.config;
    if (input.cols() != cfg.d_model) throw InternalError("forward_rows: input width differs from d_model");
    std::vector<Position> positions(input.rows());
    for (std::size_t r = 0; r < input.rows(); ++r) positions[r] = Position(first + r + 1);

    Matrix h = input;
    if (trace) {
        trace->first_row = first;
        trace->layers.assign(cfg.n_layers, LayerTrace{});
    }
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        LayerTrace* lt = trace ? &trace->layers[layer] : nullptr;
        if (lt) lt->hidden_in = h;
        const Matrix attn = attention_forward(weights, layer, h, first, positions, cache, ctx, lt, counters);
        const auto& lw = weights.layers[layer];
        for (std::size_t r = 0; r < h.rows(); ++r) {
            attention_residual(lw, attn.row(r), h.row(r));
            ffn_residual(lw, h.row(r));
        }
        if (counters) counters->macs += h.rows() * (cfg.d_model * cfg.d_model + 2 * cfg.d_model * cfg.ffn_dim);
    }
    if (counters) counters->token_forwards += input.rows();
    if (trace) trace->final_hidden = h;
    return h;
}

std::vector<float> output_logits(const ModelWeights& weights, std::span<const float> hidden) {
    std::vector<float> normed(hidden.size());
    rms_norm(hidden, weights.final_norm, normed);
    std::vector<float> logits(weights.config.vocab_size);
    matvec(normed, weights.head, logits);
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] += weights.head_bias[i];
    return logits;
}

DecoderSession::DecoderSession(const ModelWeights& weights, const TokenLayout& layout, std::optional<CdarConfig> cdar)
    : weights_(&weights), layout_(layout), cdar_(cdar), cache_(weights.config.n_layers, weights.config.d_model) {
    layout_.validate();
    if (cdar_) cdar_->validate(weights.config.n_layers);
}

std::vector<float> DecoderSession::prefill(std::span<const TokenId> text_tokens, const Matrix& image_patches,
                                           AttentionTrace* trace) {
    return prefill_embedded(embed_inputs(*weights_, text_tokens, image_patches, layout_), trace);
}

std::vector<float> DecoderSession::prefill_embedded(const Matrix& embedded, AttentionTrace* trace) {
    if (cache_.length() != 0) throw InternalError("session already prefilled");
    if (embedded.rows() != layout_.prompt_len())
        throw InputError("embedded prompt has " + std::to_string(embedded.rows()) + " rows, layout expects " +
                         std::to_string(layout_.prompt_len()));
    const AttentionContext ctx{layout_, cdar_, nullptr};
    const Matrix h = forward_rows(*weights_, embedded, 0, cache_, ctx, trace, &original_cost_);
    suffix_inputs_ = Matrix(0, embedded.cols());
    for (std::size_t r = layout_.post_image_begin(); r < embedded.rows(); ++r) suffix_inputs_.append_row(embedded.row(r));
    last_logits_ = output_logits(*weights_, h.row(h.rows() - 1));
    return last_logits_;
}

std::vector<float> DecoderSession::append(TokenId token, AttentionTrace* trace) {
    if (cache_.length() == 0) throw InternalError("append before prefill");
    if (token >= weights_->config.vocab_size)
        throw InputError("token id " + std::to_string(token) + " >= vocab_size " +
                         std::to_string(weights_->config.vocab_size));
    Matrix row(0, weights_->config.d_model);
    row.append_row(weights_->token_embedding.row(token));
    const AttentionContext ctx{layout_, cdar_, nullptr};
    const Matrix h = forward_rows(*weights_, row, cache_.length(), cache_, ctx, trace, &original_cost_);
    suffix_inputs_.append_row(row.row(0));
    last_logits_ = output_logits(*weights_, h.row(0));
    return last_logits_;
}

std::vector<float> DecoderSession::distorted_logits(const DistortionConfig& config, AttentionTrace* trace) {
    if (cache_.length() == 0) throw InternalError("distorted branch requested before prefill");
    config.validate(weights_->config.n_layers);
    const std::size_t shared = layout_.post_image_begin();
    KVCache branch(cache_, shared);
    const AttentionContext ctx{layout_, cdar_, &config};
    const Matrix h = forward_rows(*weights_, suffix_inputs_, shared, branch, ctx, trace, &distorted_cost_);
    if (branch.shared_len() != shared || branch.length() != cache_.length())
        throw InternalError("distorted branch diverged from the shared prefix layout");
    return output_logits(*weights_, h.row(h.rows() - 1));
}

}  // namespace imccd
