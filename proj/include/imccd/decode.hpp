#pragma once

// Contrastive decoding loop: original branch + distorted branch per step,
// fused as softmax((1 + alpha) * l - alpha * l~), optional plausibility
// cutoff, then greedy or seeded sampling.

#include "imccd/engine.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace imccd {

enum class Method { baseline, cmved, cmved_cdar, vcd_lite, icd_lite };

std::string_view to_string(Method method);
Method parse_method(std::string_view name);  // throws ConfigError

enum class SamplingMode { greedy, temperature };

struct DecodeConfig {
    Method method = Method::cmved_cdar;
    double alpha = 1.0;
    std::optional<double> beta;  // plausibility cutoff; off when unset
    SamplingMode mode = SamplingMode::greedy;
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::size_t max_new_tokens = 16;
    std::optional<TokenId> eos_token;

    CdarConfig cdar;            // used by cmved_cdar
    DistortionConfig distortion;  // used by cmved and cmved_cdar

    double vcd_noise_scale = 1.0;
    std::uint64_t vcd_seed = 0;
    std::vector<TokenId> icd_prefix;

    bool collect_traces = false;

    void validate(std::size_t n_layers) const;
    bool uses_cdar() const { return method == Method::cmved_cdar; }
};

struct Prompt {
    std::vector<TokenId> text_tokens;
    Matrix image_patches;
    TokenLayout layout;
};

struct ContrastiveLogits {
    std::vector<float> original;
    std::vector<float> distorted;
    std::vector<double> fused;  // probabilities
};

struct LayerTraceSummary {
    double mask_density = 0.0;
    double cross_logit_mean = 0.0;
};

struct StepRecord {
    TokenId token = 0;
    ContrastiveLogits logits;
    double entropy = 0.0;
    CostCounters original_cost;   // this step only
    CostCounters distorted_cost;  // this step only
    std::vector<LayerTraceSummary> trace;  // distorted branch, when collected
};

struct GenerationResult {
    std::vector<TokenId> tokens;
    std::vector<StepRecord> steps;
    CostCounters original_cost;
    CostCounters distorted_cost;
};

// softmax((1 + alpha) * l - alpha * l~); throws NumericError on NaN input.
std::vector<double> fuse_logits(std::span<const float> original, std::span<const float> distorted, double alpha);

// Same fusion restricted to a candidate mask (false entries get probability 0).
std::vector<double> fuse_logits(std::span<const float> original, std::span<const float> distorted, double alpha,
                                const std::vector<bool>& candidates);

// Keeps token t iff softmax(l)[t] >= beta * max softmax(l). Excluded entries of
// the returned logits are -inf; the argmax always survives.
std::vector<double> plausibility_filter(std::span<const float> logits, double beta);
std::vector<bool> plausible_candidates(std::span<const float> logits, double beta);

// Greedy picks the lowest-id argmax; temperature mode draws from p^(1/T).
TokenId sample_next(std::span<const double> distribution, SamplingMode mode, double temperature, Rng& rng);

double entropy(std::span<const double> distribution);

struct ContrastivePair {
    std::vector<float> original;
    std::vector<float> distorted;
};

// Feeds `new_token` (if any) to the original branch, then replays the
// distorted branch over the post-image suffix.
ContrastivePair dual_branch_step(DecoderSession& session, std::optional<TokenId> new_token,
                                 const DistortionConfig& config, AttentionTrace* distorted_trace = nullptr);

GenerationResult generate(const ModelWeights& weights, const Prompt& prompt, const DecodeConfig& config);

Matrix vcd_lite_distort(const Matrix& image_patches, double noise_scale, std::uint64_t seed);
Prompt icd_lite_distort(const Prompt& prompt, std::span<const TokenId> prefix_tokens);

}  // namespace imccd
