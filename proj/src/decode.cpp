#include "imccd/decode.hpp"

#include "imccd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace imccd {

std::string_view to_string(Method method) {
    switch (method) {
        case Method::baseline: return "baseline";
        case Method::cmved: return "cmved";
        case Method::cmved_cdar: return "cmved+cdar";
        case Method::vcd_lite: return "vcd-lite";
        case Method::icd_lite: return "icd-lite";
    }
    return "unknown";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::baseline, Method::cmved, Method::cmved_cdar, Method::vcd_lite, Method::icd_lite})
        if (to_string(m) == name) return m;
    throw ConfigError("unknown method '" + std::string(name) + "'");
}

void DecodeConfig::validate(std::size_t n_layers) const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be a finite non-negative number");
    if (beta && !(*beta >= 0.0 && *beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
    if (mode == SamplingMode::temperature && !(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(vcd_noise_scale >= 0.0)) throw ConfigError("vcd noise scale must be non-negative");
    cdar.validate(n_layers);
    distortion.validate(n_layers);
}

std::vector<double> fuse_logits(std::span<const float> original, std::span<const float> distorted, double alpha,
                                const std::vector<bool>& candidates) {
    if (original.size() != distorted.size() || candidates.size() != original.size())
        throw InternalError("fuse_logits: length mismatch");
    std::vector<double> z(original.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (std::isnan(original[i]) || std::isnan(distorted[i])) throw NumericError("NaN logit in contrastive fusion");
        z[i] = candidates[i] ? (1.0 + alpha) * double(original[i]) - alpha * double(distorted[i])
                             : -std::numeric_limits<double>::infinity();
    }
    return softmax(z);
}

std::vector<double> fuse_logits(std::span<const float> original, std::span<const float> distorted, double alpha) {
    return fuse_logits(original, distorted, alpha, std::vector<bool>(original.size(), true));
}

std::vector<bool> plausible_candidates(std::span<const float> logits, double beta) {
    std::vector<double> z(logits.begin(), logits.end());
    const auto p = softmax(z);
    const double top = *std::max_element(p.begin(), p.end());
    std::vector<bool> keep(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) keep[i] = p[i] >= beta * top;
    return keep;
}

std::vector<double> plausibility_filter(std::span<const float> logits, double beta) {
    const auto keep = plausible_candidates(logits, beta);
    std::vector<double> out(logits.begin(), logits.end());
    for (std::size_t i = 0; i < out.size(); ++i)
        if (!keep[i]) out[i] = -std::numeric_limits<double>::infinity();
    return out;
}

TokenId sample_next(std::span<const double> distribution, SamplingMode mode, double temperature, Rng& rng) {
    if (distribution.empty()) throw InternalError("sample_next on an empty distribution");
    if (mode == SamplingMode::greedy) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < distribution.size(); ++i)
            if (distribution[i] > distribution[best]) best = i;
        if (!(distribution[best] > 0.0)) throw InternalError("sample_next: no candidate has positive mass");
        return TokenId(best);
    }
    std::vector<double> w(distribution.size());
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = distribution[i] > 0.0 ? std::pow(distribution[i], 1.0 / temperature) : 0.0;
        total += w[i];
    }
    if (!(total > 0.0)) throw InternalError("sample_next: empty candidate set");
    const double u = rng.uniform() * total;
    double cum = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        cum += w[i];
        last = i;
        if (u < cum) return TokenId(i);
    }
    return TokenId(last);
}

double entropy(std::span<const double> distribution) {
    double h = 0.0;
    for (double p : distribution)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

ContrastivePair dual_branch_step(DecoderSession& session, std::optional<TokenId> new_token,
                                 const DistortionConfig& config, AttentionTrace* distorted_trace) {
    ContrastivePair pair;
    pair.original = new_token ? session.append(*new_token) : session.last_logits();
    pair.distorted = session.distorted_logits(config, distorted_trace);
    return pair;
}

Matrix vcd_lite_distort(const Matrix& image_patches, double noise_scale, std::uint64_t seed) {
    Matrix out = image_patches;
    if (noise_scale == 0.0) return out;
    Rng rng(seed);
    for (float& v : out.flat()) v = float(double(v) + noise_scale * rng.normal());
    return out;
}

Prompt icd_lite_distort(const Prompt& prompt, std::span<const TokenId> prefix_tokens) {
    Prompt out = prompt;
    out.text_tokens.insert(out.text_tokens.begin(), prefix_tokens.begin(), prefix_tokens.end());
    out.layout.system_len += prefix_tokens.size();
    out.layout.text_len += prefix_tokens.size();
    return out;
}

namespace {

CostCounters diff(const CostCounters& after, const CostCounters& before) {
    return {after.token_forwards - before.token_forwards, after.attention_dots - before.attention_dots,
            after.macs - before.macs};
}

// Full uncached second forward over a modified prompt plus the tokens generated so far.
std::vector<float> full_second_forward(const ModelWeights& weights, const Prompt& prompt,
                                       std::span<const TokenId> generated, CostCounters& cost) {
    DecoderSession s(weights, prompt.layout);
    s.prefill(prompt.text_tokens, prompt.image_patches);
    for (TokenId t : generated) s.append(t);
    cost += s.original_cost();
    return s.last_logits();
}

}  // namespace

GenerationResult generate(const ModelWeights& weights, const Prompt& prompt, const DecodeConfig& config) {
    config.validate(weights.config.n_layers);
    GenerationResult result;
    if (config.max_new_tokens == 0) return result;

    std::optional<CdarConfig> cdar;
    if (config.uses_cdar()) cdar = config.cdar;
    DecoderSession session(weights, prompt.layout, cdar);

    std::optional<Prompt> second_prompt;
    if (config.method == Method::vcd_lite) {
        second_prompt = prompt;
        second_prompt->image_patches = vcd_lite_distort(prompt.image_patches, config.vcd_noise_scale, config.vcd_seed);
    } else if (config.method == Method::icd_lite) {
        second_prompt = icd_lite_distort(prompt, config.icd_prefix);
    }

    Rng rng(config.seed);
    CostCounters second_cost;
    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
        const CostCounters orig_before = session.original_cost();
        const CostCounters dist_before = session.distorted_cost();
        const CostCounters second_before = second_cost;

        StepRecord rec;
        if (step == 0) {
            rec.logits.original = session.prefill(prompt.text_tokens, prompt.image_patches);
        } else {
            rec.logits.original = session.append(result.tokens.back());
        }

        AttentionTrace trace;
        switch (config.method) {
            case Method::baseline:
                rec.logits.distorted = rec.logits.original;
                break;
            case Method::cmved:
            case Method::cmved_cdar:
                rec.logits.distorted =
                    session.distorted_logits(config.distortion, config.collect_traces ? &trace : nullptr);
                break;
            case Method::vcd_lite:
            case Method::icd_lite:
                rec.logits.distorted = full_second_forward(weights, *second_prompt, result.tokens, second_cost);
                break;
        }

        const double alpha = config.method == Method::baseline ? 0.0 : config.alpha;
        const std::vector<bool> candidates = config.beta
                                                 ? plausible_candidates(rec.logits.original, *config.beta)
                                                 : std::vector<bool>(rec.logits.original.size(), true);
        rec.logits.fused = fuse_logits(rec.logits.original, rec.logits.distorted, alpha, candidates);
        rec.entropy = entropy(rec.logits.fused);
        rec.token = sample_next(rec.logits.fused, config.mode, config.temperature, rng);

        rec.original_cost = diff(session.original_cost(), orig_before);
        rec.distorted_cost = diff(session.distorted_cost(), dist_before);
        rec.distorted_cost += diff(second_cost, second_before);
        if (config.collect_traces)
            for (const auto& lt : trace.layers) rec.trace.push_back({lt.mask_density, lt.cross_logit_mean});

        result.original_cost += rec.original_cost;
        result.distorted_cost += rec.distorted_cost;
        result.tokens.push_back(rec.token);
        const bool stop = config.eos_token && rec.token == *config.eos_token;
        result.steps.push_back(std::move(rec));
        if (stop) break;
    }
    return result;
}

}  // namespace imccd
