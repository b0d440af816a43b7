#pragma once

// Synthetic benchmark: a seeded toy world with planted object co-occurrence,
// POPE/caption/MME style probes over it, and a hand-constructed model whose
// cross-modal attention carries a spurious anchor -> dependent channel.

#include "imccd/decode.hpp"
#include "imccd/metrics.hpp"

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

namespace imccd::synth {

// Fixed token table. Object words start at kObjectBase.
inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;
inline constexpr TokenId kYes = 2;
inline constexpr TokenId kNo = 3;
inline constexpr TokenId kPeriod = 4;  // sentence delimiter
inline constexpr TokenId kObjectBase = 32;

const std::vector<std::string>& function_words();  // ids [0, kObjectBase)
std::optional<TokenId> function_word_id(std::string_view word);

struct Vocabulary {
    std::vector<std::string> objects;

    TokenId object_token(std::size_t object) const { return TokenId(kObjectBase + object); }
    std::optional<std::size_t> object_of(TokenId token) const;
    std::string word(TokenId token) const;
    std::string detokenize(std::span<const TokenId> tokens) const;
};

struct CorrelationTarget {
    std::size_t anchor = 0;
    std::size_t dependent = 0;
    double given_anchor = 0.0;  // P(dependent | anchor)
};

struct WorldSpec {
    std::vector<std::string> objects;
    // P(present) for free objects; P(present | anchor absent) for dependents.
    std::vector<double> base_rate;
    std::vector<CorrelationTarget> correlations;
    std::size_t n_scenes = 400;
    std::size_t image_tokens = 16;
    std::size_t patch_dim = 16;
    std::size_t patches_per_object = 2;
    double patch_noise = 0.05;
    std::uint64_t seed = 0;

    // Throws DataError with a diagnostic when the targets cannot be realized.
    void validate() const;
};

// 12 objects, four anchor -> dependent pairs at P(dependent | anchor) = 0.85.
WorldSpec default_world_spec(std::uint64_t seed, std::size_t n_scenes = 400);

struct Scene {
    std::string id;
    std::set<std::size_t> objects;
    std::vector<int> slots;  // object index per patch, -1 for background
    Matrix patches;          // image_tokens x patch_dim
};

struct World {
    WorldSpec spec;
    Vocabulary vocab;
    std::vector<Scene> scenes;
    CoocStats cooc;

    const Scene& scene(std::string_view id) const;  // throws InputError
    std::map<std::string, std::set<std::string>> image_objects() const;
};

World gen_world(const WorldSpec& spec);

// Patch features: one-hot object id in [0, 12), object flag at 12, background
// flag at 13, constant 1 at 15.
inline constexpr std::size_t kMaxObjects = 12;
std::vector<float> clean_patch(int object, std::size_t patch_dim);

enum class ProbeKind { pope, caption, mme };
enum class ProbeStrategy { random, popular, adversarial };
std::string_view to_string(ProbeKind k);
std::string_view to_string(ProbeStrategy s);
ProbeStrategy parse_strategy(std::string_view s);  // throws ConfigError

struct ProbeTemplate {
    bool one_word_instruction = true;  // appends "please answer in one word ."
    std::size_t pope_per_scene = 2;    // split evenly between yes and no
    bool include_captions = false;
    bool include_mme = false;
};

struct Probe {
    std::string probe_id;
    ProbeKind kind = ProbeKind::pope;
    ProbeStrategy strategy = ProbeStrategy::random;
    std::string image_id;
    std::string object;  // empty for captions
    bool label_yes = false;
    std::string question_id;  // mme only
    std::vector<TokenId> text_tokens;
    TokenLayout layout;
};

inline constexpr std::size_t kSystemLen = 3;  // [bos, "user", ":"]

std::vector<TokenId> pope_question(const Vocabulary& vocab, std::size_t object, bool one_word);
TokenLayout prompt_layout(std::size_t image_tokens, std::size_t query_len);

std::vector<Probe> emit_probes(const World& world, ProbeStrategy strategy, const ProbeTemplate& tmpl,
                               std::uint64_t seed);

Prompt probe_prompt(const World& world, const Probe& probe);

// JSONL records ("schema" field versioned).
inline constexpr const char* kSceneSchema = "imccd.scene.v1";
inline constexpr const char* kWorldHeaderSchema = "imccd.world.v1";
inline constexpr const char* kProbeSchema = "imccd.probe.v1";

nlohmann::json probe_to_json(const Probe& p);
Probe probe_from_json(const nlohmann::json& j);  // throws DataError
nlohmann::json scene_to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j, std::size_t image_tokens, std::size_t patch_dim);
nlohmann::json world_header_json(const World& w);
nlohmann::json cooc_to_json(const CoocStats& c);
CoocStats cooc_from_json(const nlohmann::json& j);
std::string world_to_jsonl(const World& w);
World world_from_jsonl(std::string_view text);  // throws DataError

struct BiasConfig {
    double bias_scale = 4.0;  // spurious query strength; calibration grows it
    double growth = 1.25;
    std::size_t max_iterations = 16;
    bool calibrate = true;
    double target_failure_rate = 0.5;  // planted: dependent asked, anchor present, dependent absent
    double target_neither_no_rate = 0.9;
    double probe_margin = 1.0;         // required A-patch minus unrelated-patch cross logit gap
    std::size_t calibration_probes = 200;
    double noise_scale = 0.02;
    std::uint64_t seed = 0;
};

struct BiasCheck {
    double failure_rate = 0.0;
    double neither_no_rate = 0.0;
    double probe_margin = 0.0;
    std::size_t planted_probes = 0;
    std::size_t neither_probes = 0;
};

struct BiasedModel {
    ModelWeights weights;
    double bias_scale = 0.0;
    std::size_t iterations = 0;
    BiasCheck check;
};

ModelConfig biased_model_config();

// Raw construction at a fixed bias scale; no calibration.
ModelWeights build_biased_weights(const World& world, double bias_scale, double noise_scale, std::uint64_t seed);

// Cross logit probe and greedy baseline answers on planted / neither scenes.
BiasCheck measure_bias(const ModelWeights& weights, const World& world, std::size_t max_probes);

// Throws DataError when calibration cannot reach the targets.
BiasedModel build_biased_model(const World& world, const BiasConfig& config);

// Greedy one-token answer for a POPE probe.
Answer answer_probe(const ModelWeights& weights, const World& world, const Probe& probe, const DecodeConfig& config,
                    GenerationResult* result = nullptr);

// Prompt whose image tokens all carry the same patch vector.
Prompt identical_content_prompt(const Vocabulary& vocab, std::size_t image_tokens, std::size_t patch_dim,
                                std::size_t asked_object);

}  // namespace imccd::synth
