#include "imccd/oracle.hpp"

#include "imccd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace imccd::oracle {

bool within_tolerance(double a, double b, double rel, double abs_floor) {
    if (std::isnan(a) || std::isnan(b)) return false;
    return std::abs(a - b) <= std::max(rel * std::abs(b), abs_floor);
}

std::string_view to_string(PositionVariant v) {
    switch (v) {
        case PositionVariant::standard: return "standard";
        case PositionVariant::refined: return "refined";
        case PositionVariant::removed: return "removed";
    }
    return "standard";
}

std::vector<std::optional<Position>> variant_key_positions(const TokenLayout& layout, std::size_t seq,
                                                           PositionVariant v) {
    std::vector<std::optional<Position>> out(seq);
    for (std::size_t i = 0; i < seq; ++i) {
        switch (v) {
            case PositionVariant::standard: out[i] = Position(i + 1); break;
            case PositionVariant::refined: out[i] = refined_position(layout, i); break;
            case PositionVariant::removed:
                if (!layout.is_image(i)) out[i] = Position(i + 1);
                break;
        }
    }
    return out;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Matrix head_slice(const Matrix& m, std::size_t off, std::size_t hd) {
    Matrix out(m.rows(), hd);
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t k = 0; k < hd; ++k) out(r, k) = m(r, off + k);
    return out;
}

Matrix rotated(const Matrix& raw, std::span<const Position> pos, std::size_t n_heads, std::size_t hd, double base) {
    Matrix out = raw;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t h = 0; h < n_heads; ++h) rope_rotate_row(out.row(r).subspan(h * hd, hd), pos[r], base);
    return out;
}

}  // namespace

Matrix naive_attention(const ModelWeights& weights, std::size_t layer, const Matrix& hidden, const TokenLayout& layout,
                       const NaiveOptions& options, std::vector<MatrixD>* head_weights,
                       std::vector<BinaryMatrix>* head_masks) {
    const auto& cfg = weights.config;
    const std::size_t seq = hidden.rows();
    const std::size_t d = cfg.d_model, hd = cfg.head_dim, n_heads = cfg.n_heads;
    const double base = cfg.rope_base;
    const auto& lw = weights.layers.at(layer);
    const std::size_t post = layout.post_image_begin();
    const std::size_t prompt = layout.prompt_len();

    Matrix q_raw(seq, d), k_raw(seq, d), v(seq, d);
    std::vector<float> normed(d);
    for (std::size_t i = 0; i < seq; ++i) {
        rms_norm(hidden.row(i), lw.attn_norm, normed);
        matvec(normed, lw.wq, q_raw.row(i));
        matvec(normed, lw.wk, k_raw.row(i));
        matvec(normed, lw.wv, v.row(i));
    }

    std::vector<Position> std_pos(seq), ref_pos(seq);
    for (std::size_t i = 0; i < seq; ++i) {
        std_pos[i] = Position(i + 1);
        ref_pos[i] = refined_position(layout, i);
    }
    const bool refined_variant = options.variant == PositionVariant::refined;
    const Matrix q_main = rotated(q_raw, refined_variant ? ref_pos : std_pos, n_heads, hd, base);
    const Matrix k_main = rotated(k_raw, refined_variant ? ref_pos : std_pos, n_heads, hd, base);
    const Matrix q_ref = rotated(q_raw, ref_pos, n_heads, hd, base);
    const Matrix k_ref = rotated(k_raw, ref_pos, n_heads, hd, base);

    const bool cdar_on = options.cdar && options.cdar->applies_to(layer);
    const bool distort = options.distortion && options.distortion->applies_to(layer);
    const double scale = 1.0 / std::sqrt(double(hd));

    if (head_weights) head_weights->assign(n_heads, MatrixD{});
    if (head_masks) head_masks->assign(n_heads, BinaryMatrix{});

    Matrix out(seq, d);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        MatrixD a_l(seq, seq, kNegInf), a_c(seq, seq, kNegInf);
        for (std::size_t i = 0; i < seq; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
                a_l(i, j) = dot(q_main.row(i).subspan(off, hd), k_main.row(j).subspan(off, hd)) * scale;
                a_c(i, j) = dot(q_ref.row(i).subspan(off, hd), k_ref.row(j).subspan(off, hd)) * scale;
            }
        if (options.variant == PositionVariant::removed)
            for (std::size_t i = post; i < seq; ++i)
                for (std::size_t j = layout.image_begin(); j < layout.image_end(); ++j)
                    a_l(i, j) = dot(q_raw.row(i).subspan(off, hd), k_raw.row(j).subspan(off, hd)) * scale;
        const MatrixD logits = cdar_on ? blend_cross_logits(a_l, a_c, *options.cdar, layout, layer) : a_l;

        // Significance mask: the post-image prompt rows share one threshold,
        // every generated row gets its own.
        BinaryMatrix mask(seq, seq, 0);
        if (distort && !options.distortion->force_empty_mask) {
            auto add_group = [&](std::size_t begin, std::size_t end) {
                if (begin >= end) return;
                MatrixD block(end - begin, layout.image_len);
                for (std::size_t i = begin; i < end; ++i)
                    for (std::size_t c = 0; c < layout.image_len; ++c) block(i - begin, c) = logits(i, layout.image_begin() + c);
                const BinaryMatrix g = build_cross_mask(block).global(layout, seq, begin);
                for (std::size_t k = 0; k < g.size(); ++k) mask.flat()[k] |= g.flat()[k];
            };
            add_group(post, std::min(prompt, seq));
            if (options.distortion->apply_during_generation)
                for (std::size_t i = prompt; i < seq; ++i) add_group(i, i + 1);
        }

        MatrixD a(seq, seq, 0.0);
        for (std::size_t i = 0; i < seq; ++i) {
            const auto row = softmax(logits.row(i));
            std::copy(row.begin(), row.end(), a.row(i).begin());
        }
        const Matrix v_h = head_slice(v, off, hd);
        const std::vector<float> mu = distort ? mean_value_vector(v_h, layout) : std::vector<float>(hd, 0.0f);
        const Matrix o = distorted_attention_output(a, v_h, mask, mu);
        for (std::size_t i = 0; i < seq; ++i)
            for (std::size_t k = 0; k < hd; ++k) out(i, off + k) = o(i, k);
        if (head_weights) (*head_weights)[h] = std::move(a);
        if (head_masks) (*head_masks)[h] = std::move(mask);
    }
    return out;
}

NaiveForward naive_forward(const ModelWeights& weights, const Matrix& embedded, const TokenLayout& layout,
                           const NaiveOptions& options) {
    const auto& cfg = weights.config;
    NaiveForward f;
    Matrix h = embedded;
    const std::size_t seq = h.rows();
    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        f.layer_inputs.push_back(h);
        std::vector<MatrixD> hw;
        std::vector<BinaryMatrix> hm;
        const Matrix attn = naive_attention(weights, layer, h, layout, options, options.keep_weights ? &hw : nullptr,
                                            options.keep_weights ? &hm : nullptr);
        const auto& lw = weights.layers[layer];
        for (std::size_t r = 0; r < seq; ++r) {
            attention_residual(lw, attn.row(r), h.row(r));
            ffn_residual(lw, h.row(r));
        }
        if (options.keep_weights) {
            f.weights.push_back(std::move(hw));
            f.masks.push_back(std::move(hm));
        }
        f.cost.attention_dots += cfg.n_heads * seq * (seq + 1) / 2;
        f.cost.macs += seq * (4 * cfg.d_model * cfg.d_model + 2 * cfg.d_model * cfg.ffn_dim) +
                       cfg.n_heads * seq * (seq + 1) * cfg.head_dim;
    }
    f.cost.token_forwards += seq;
    f.final_hidden = std::move(h);
    return f;
}

Matrix embed_sequence(const ModelWeights& weights, const Prompt& prompt, std::span<const TokenId> generated) {
    Matrix e = embed_inputs(weights, prompt.text_tokens, prompt.image_patches, prompt.layout);
    for (TokenId t : generated) {
        if (t >= weights.config.vocab_size) throw InputError("generated token id out of range");
        e.append_row(weights.token_embedding.row(t));
    }
    return e;
}

NaiveStep naive_double_forward(const ModelWeights& weights, const Prompt& prompt, std::span<const TokenId> generated,
                               const DecodeConfig& config) {
    NaiveOptions orig;
    if (config.uses_cdar()) orig.cdar = config.cdar;
    NaiveStep step;
    step.original_forward = naive_forward(weights, embed_sequence(weights, prompt, generated), prompt.layout, orig);
    const Matrix& hf = step.original_forward.final_hidden;
    step.original = output_logits(weights, hf.row(hf.rows() - 1));

    switch (config.method) {
        case Method::baseline:
            step.distorted = step.original;
            return step;
        case Method::cmved:
        case Method::cmved_cdar: {
            NaiveOptions dist = orig;
            dist.distortion = &config.distortion;
            step.distorted_forward =
                naive_forward(weights, embed_sequence(weights, prompt, generated), prompt.layout, dist);
            break;
        }
        case Method::vcd_lite:
        case Method::icd_lite: {
            Prompt second = config.method == Method::vcd_lite ? prompt : icd_lite_distort(prompt, config.icd_prefix);
            if (config.method == Method::vcd_lite)
                second.image_patches = vcd_lite_distort(prompt.image_patches, config.vcd_noise_scale, config.vcd_seed);
            step.distorted_forward =
                naive_forward(weights, embed_sequence(weights, second, generated), second.layout, NaiveOptions{});
            break;
        }
    }
    const Matrix& hd = step.distorted_forward.final_hidden;
    step.distorted = output_logits(weights, hd.row(hd.rows() - 1));
    return step;
}

namespace {

struct Comparer {
    ComparisonReport& report;
    std::size_t step = 0;

    void value(double actual, double expected, const char* branch, std::optional<std::size_t> layer, std::size_t pos) {
        const double diff = std::abs(actual - expected);
        report.max_abs_diff = std::max(report.max_abs_diff, diff);
        const double rel = diff / std::max(std::abs(expected), kAbsFloor);
        report.max_rel_diff = std::max(report.max_rel_diff, rel);
        if (layer) report.per_layer_max_rel[*layer] = std::max(report.per_layer_max_rel[*layer], rel);
        ++report.compared_values;
        if (!within_tolerance(actual, expected)) {
            report.pass = false;
            if (!report.first_divergence) report.first_divergence = Divergence{step, branch, layer, pos, expected, actual};
        }
    }

    void vectors(std::span<const float> actual, std::span<const float> expected, const char* branch) {
        if (actual.size() != expected.size()) throw InternalError("logit length mismatch in oracle comparison");
        for (std::size_t i = 0; i < actual.size(); ++i) value(actual[i], expected[i], branch, std::nullopt, i);
    }

    void trace(const AttentionTrace& t, const NaiveForward& f, const char* branch) {
        for (std::size_t l = 0; l < t.layers.size(); ++l) {
            const Matrix& got = t.layers[l].hidden_in;
            for (std::size_t r = 0; r < got.rows(); ++r)
                for (std::size_t c = 0; c < got.cols(); ++c)
                    value(got(r, c), f.layer_inputs[l](t.first_row + r, c), branch, l, t.first_row + r);
        }
    }
};

}  // namespace

ComparisonReport compare_generation(const ModelWeights& weights, const Prompt& prompt, const DecodeConfig& config,
                                    std::string label) {
    if (config.method == Method::vcd_lite || config.method == Method::icd_lite)
        throw ConfigError("oracle comparison covers baseline, cmved and cmved+cdar");
    config.validate(weights.config.n_layers);
    ComparisonReport report;
    report.label = std::move(label);
    report.per_layer_max_rel.assign(weights.config.n_layers, 0.0);
    Comparer cmp{report};

    std::optional<CdarConfig> cdar;
    if (config.uses_cdar()) cdar = config.cdar;
    DecoderSession session(weights, prompt.layout, cdar);
    std::vector<TokenId> tokens;
    Rng rng(config.seed), oracle_rng(config.seed);

    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
        cmp.step = step;
        AttentionTrace ot, dt;
        const std::vector<float> orig = step == 0 ? session.prefill(prompt.text_tokens, prompt.image_patches, &ot)
                                                  : session.append(tokens.back(), &ot);
        const bool distorts = config.method != Method::baseline;
        const std::vector<float> dist = distorts ? session.distorted_logits(config.distortion, &dt) : orig;

        const NaiveStep naive = naive_double_forward(weights, prompt, tokens, config);
        report.oracle_cost += naive.original_forward.cost;
        report.oracle_cost += naive.distorted_forward.cost;

        cmp.trace(ot, naive.original_forward, "original");
        cmp.vectors(orig, naive.original, "original");
        if (distorts) cmp.trace(dt, naive.distorted_forward, "distorted");
        cmp.vectors(dist, naive.distorted, "distorted");

        const double alpha = distorts ? config.alpha : 0.0;
        auto pick = [&](const std::vector<float>& l, const std::vector<float>& lt, Rng& r) {
            const std::vector<bool> cand =
                config.beta ? plausible_candidates(l, *config.beta) : std::vector<bool>(l.size(), true);
            return sample_next(fuse_logits(l, lt, alpha, cand), config.mode, config.temperature, r);
        };
        const TokenId token = pick(orig, dist, rng);
        if (pick(naive.original, naive.distorted, oracle_rng) != token) report.tokens_match = false;
        tokens.push_back(token);
        ++report.steps;
        if (config.eos_token && token == *config.eos_token) break;
    }
    report.engine_cost = session.original_cost();
    report.engine_cost += session.distorted_cost();
    if (!report.tokens_match) report.pass = false;
    return report;
}

MatrixD ablation_attention_mask(const MatrixD& weights, const BinaryMatrix& mask) {
    if (weights.rows() != mask.rows() || weights.cols() != mask.cols())
        throw InternalError("ablation_attention_mask: shape mismatch");
    const bool causal = weights.rows() == weights.cols();
    MatrixD out(weights.rows(), weights.cols(), 0.0);
    for (std::size_t i = 0; i < weights.rows(); ++i) {
        double kept = 0.0, row_mass = 0.0;
        for (std::size_t j = 0; j < weights.cols(); ++j) {
            row_mass += weights(i, j);
            if (!mask(i, j)) kept += weights(i, j);
        }
        if (row_mass == 0.0) continue;  // row never realized
        if (kept > 0.0) {
            for (std::size_t j = 0; j < weights.cols(); ++j)
                if (!mask(i, j)) out(i, j) = weights(i, j) / kept;
            continue;
        }
        // All mass was masked: spread uniformly over the unmasked visible positions.
        const std::size_t visible = causal ? i + 1 : weights.cols();
        std::size_t candidates = 0;
        for (std::size_t j = 0; j < visible; ++j)
            if (!mask(i, j)) ++candidates;
        if (candidates == 0) throw NumericError("attention row " + std::to_string(i) + " is fully masked");
        for (std::size_t j = 0; j < visible; ++j)
            if (!mask(i, j)) out(i, j) = 1.0 / double(candidates);
    }
    return out;
}

AttentionMass attention_mass(const std::vector<std::vector<MatrixD>>& weights, const TokenLayout& layout,
                             std::size_t row, const std::vector<std::size_t>& layers) {
    std::vector<std::size_t> use = layers;
    if (use.empty())
        for (std::size_t l = 0; l < weights.size(); ++l) use.push_back(l);
    AttentionMass m;
    m.per_token.assign(layout.image_len, 0.0);
    std::size_t count = 0;
    for (std::size_t l : use)
        for (const auto& head : weights.at(l)) {
            for (std::size_t k = 0; k < layout.image_len; ++k) m.per_token[k] += head(row, layout.image_begin() + k);
            ++count;
        }
    if (count == 0) throw InternalError("attention_mass over an empty layer set");
    for (double& v : m.per_token) v /= double(count);
    const std::size_t half = layout.image_len / 2;
    for (std::size_t k = 0; k < layout.image_len; ++k) (k < half ? m.first_half : m.second_half) += m.per_token[k];
    return m;
}

AttentionMass attention_mass(const AttentionTrace& trace, const TokenLayout& layout,
                             const std::vector<std::size_t>& layers) {
    std::vector<std::vector<MatrixD>> w;
    for (const auto& lt : trace.layers) {
        std::vector<MatrixD> heads;
        for (const auto& ht : lt.heads) heads.push_back(ht.weights);
        w.push_back(std::move(heads));
    }
    if (w.empty() || w[0].empty()) throw InternalError("trace carries no attention weights");
    return attention_mass(w, layout, w[0][0].rows() - 1, layers);
}

PositionAblation ablation_no_position(const ModelWeights& weights, const Prompt& prompt) {
    const Matrix e = embed_sequence(weights, prompt, {});
    auto run = [&](PositionVariant v) {
        NaiveOptions o;
        o.variant = v;
        o.keep_weights = true;
        const NaiveForward f = naive_forward(weights, e, prompt.layout, o);
        return attention_mass(f.weights, prompt.layout, e.rows() - 1);
    };
    return {run(PositionVariant::standard), run(PositionVariant::removed), run(PositionVariant::refined)};
}

}  // namespace imccd::oracle
