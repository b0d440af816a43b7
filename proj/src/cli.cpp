#include "imccd/cli.hpp"

#include "imccd/decode.hpp"
#include "imccd/errors.hpp"
#include "imccd/manifest.hpp"
#include "imccd/metrics.hpp"
#include "imccd/oracle.hpp"
#include "imccd/synth.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <tuple>

#include "CLI11.hpp"
#include "json.hpp"

namespace imccd::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kPromptSchema = "imccd.prompt.v1";
constexpr const char* kGenerationSchema = "imccd.generation.v1";
constexpr const char* kTraceSchema = "imccd.trace.v1";
constexpr double kDefaultBeta = 0.1;

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto end = std::min(s.find(sep, start), s.size());
        if (auto piece = trim(s.substr(start, end - start)); !piece.empty()) out.push_back(std::move(piece));
        start = end + 1;
    }
    return out;
}

json parse_json(std::string_view text, const std::string& where) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(where + ": " + e.what());
    }
}

std::vector<json> read_jsonl(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<json> out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (trim(line).empty()) continue;
        json j = parse_json(line, path + ":" + std::to_string(n));
        if (!j.is_object()) throw DataError(path + ":" + std::to_string(n) + ": expected a JSON object");
        out.push_back(std::move(j));
    }
    return out;
}

std::string to_jsonl(const std::vector<json>& records) {
    std::string out;
    for (const auto& r : records) out += r.dump() + '\n';
    return out;
}

template <class F>
auto with_field_errors(const std::string& where, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw DataError(where + ": " + e.what());
    }
}

json ratio_json(const std::optional<Ratio>& r) {
    if (!r) return nullptr;
    return {{"num", r->num}, {"den", r->den}, {"value", r->value()}};
}

json cost_json(const CostCounters& c) {
    return {{"token_forwards", c.token_forwards}, {"attention_dots", c.attention_dots}, {"macs", c.macs}};
}

std::string csv_field(const std::optional<Ratio>& r) {
    if (!r) return ",,";
    std::ostringstream s;
    s.precision(17);
    s << r->num << ',' << r->den << ',' << r->value();
    return s.str();
}

// Everything a command leaves behind for its manifest.
struct Run {
    RunManifest manifest;
    std::string manifest_path;
    json counters = json::object();

    void input(const std::string& path) { manifest.inputs[path] = file_digest(path); }
    void output(const std::string& path, std::string_view bytes) {
        write_file(path, bytes);
        manifest.outputs[path] = "fnv1a64:" + hex64(fnv1a64(bytes));
    }
};

std::string seed_list(const std::map<std::string, std::uint64_t>& seeds) {
    std::string s;
    for (const auto& [k, v] : seeds) s += (s.empty() ? "" : ", ") + k + "=" + std::to_string(v);
    return s;
}

// ---------------------------------------------------------------- gen-world

struct GenWorldOptions {
    std::uint64_t seed = 0;
    std::size_t scenes = 400;
    std::string out;
    std::string strategy = "adversarial";
    std::size_t probes_per_scene = 2;
    bool captions = false;
    bool mme = false;
    double bias_scale = 4.0;
    bool no_calibrate = false;
    double noise = 0.02;
    std::size_t calibration_probes = 200;
};

void add_gen_world(CLI::App& sub, GenWorldOptions& o) {
    sub.add_option("--seed", o.seed, "World, probe and weight seed")->capture_default_str();
    sub.add_option("--scenes", o.scenes, "Number of scenes")->capture_default_str();
    sub.add_option("--out", o.out, "Output directory")->required();
    sub.add_option("--strategy", o.strategy, "Negative sampling: random, popular or adversarial")->capture_default_str();
    sub.add_option("--probes-per-scene", o.probes_per_scene, "POPE probes per scene, half positive")
        ->capture_default_str();
    sub.add_flag("--captions", o.captions, "Also emit one caption probe per scene");
    sub.add_flag("--mme", o.mme, "Also emit an MME question pair per scene");
    sub.add_option("--bias-scale", o.bias_scale, "Initial spurious-channel strength")->capture_default_str();
    sub.add_flag("--no-calibrate", o.no_calibrate, "Keep --bias-scale as given");
    sub.add_option("--noise", o.noise, "Weight noise on the unused layers")->capture_default_str();
    sub.add_option("--calibration-probes", o.calibration_probes, "Probes per calibration round")
        ->capture_default_str();
}

int cmd_gen_world(const GenWorldOptions& o, Run& run, std::ostream& out) {
    if (o.scenes == 0) throw ConfigError("--scenes must be positive");
    const auto strategy = synth::parse_strategy(o.strategy);
    const synth::World world = synth::gen_world(synth::default_world_spec(o.seed, o.scenes));

    synth::ProbeTemplate tmpl;
    tmpl.pope_per_scene = o.probes_per_scene;
    tmpl.include_captions = o.captions;
    tmpl.include_mme = o.mme;
    auto probes = synth::emit_probes(world, strategy, tmpl, derive_seed(o.seed, 1));
    std::sort(probes.begin(), probes.end(), [](const auto& a, const auto& b) { return a.probe_id < b.probe_id; });

    synth::BiasConfig bias;
    bias.bias_scale = o.bias_scale;
    bias.calibrate = !o.no_calibrate;
    bias.noise_scale = o.noise;
    bias.calibration_probes = o.calibration_probes;
    bias.seed = derive_seed(o.seed, 2);
    const synth::BiasedModel model = synth::build_biased_model(world, bias);

    const fs::path dir(o.out);
    run.output((dir / "world.jsonl").string(), synth::world_to_jsonl(world));
    std::vector<json> probe_records;
    for (const auto& p : probes) probe_records.push_back(synth::probe_to_json(p));
    run.output((dir / "probes.jsonl").string(), to_jsonl(probe_records));
    run.output((dir / "cooc.json").string(), synth::cooc_to_json(world.cooc).dump(2) + "\n");

    const fs::path weights_path = dir / "weights.bin";
    save_weights(model.weights, weights_path);
    run.manifest.outputs[weights_path.string()] = file_digest(weights_path);

    const json model_info = {
        {"schema", "imccd.model.v1"},
        {"bias_scale", model.bias_scale},
        {"calibration_rounds", model.iterations},
        {"failure_rate", model.check.failure_rate},
        {"neither_no_rate", model.check.neither_no_rate},
        {"probe_margin", model.check.probe_margin},
        {"planted_probes", model.check.planted_probes},
        {"neither_probes", model.check.neither_probes},
    };
    run.output((dir / "model.json").string(), model_info.dump(2) + "\n");

    run.manifest.seeds = {{"world", o.seed}, {"probes", derive_seed(o.seed, 1)}, {"weights", bias.seed}};
    run.counters = {{"scenes", world.scenes.size()}, {"probes", probes.size()}, {"model", model_info}};
    out << "wrote " << world.scenes.size() << " scenes and " << probes.size() << " probes to " << dir.string()
        << " (bias scale " << model.bias_scale << ", baseline failure rate " << model.check.failure_rate << ")\n";
    return kOk;
}

// ----------------------------------------------------------------- generate

struct GenerateOptions {
    std::string weights;
    std::string prompt;
    std::string probes;
    std::string world;
    std::string method = "cmved+cdar";
    std::optional<double> alpha;
    std::optional<double> beta;
    const CLI::Option* beta_option = nullptr;
    double gamma = 0.2;
    std::size_t cdar_layers = 3;
    bool no_cdar = false;
    std::uint64_t seed = 0;
    std::optional<std::size_t> max_new_tokens;
    std::optional<double> temperature;
    TokenId eos = synth::kEos;
    bool no_eos = false;
    double vcd_noise = 1.0;
    std::string icd_prefix = "<unk>,<unk>";
    std::string dump_traces;
    std::string out;
};

void add_generate(CLI::App& sub, GenerateOptions& o) {
    sub.add_option("--weights", o.weights, "Weight file")->required();
    sub.add_option("--prompt", o.prompt, "Prompt record(s), JSON or JSONL with schema imccd.prompt.v1");
    sub.add_option("--probes", o.probes, "Probe JSONL from gen-world (needs --world)");
    sub.add_option("--world", o.world, "World JSONL from gen-world");
    sub.add_option("--method", o.method, "baseline, cmved, cmved+cdar, vcd-lite or icd-lite")->capture_default_str();
    sub.add_option("--alpha", o.alpha, "Contrast strength (default 3 for yes/no probes, else 1)");
    o.beta_option =
        sub.add_option("--beta", o.beta, "Plausibility cutoff; off when unset, 0.1 when given bare")->expected(0, 1);
    sub.add_option("--gamma", o.gamma, "Refinement blend weight")->capture_default_str();
    sub.add_option("--cdar-layers", o.cdar_layers, "Layers that blend refined logits")->capture_default_str();
    sub.add_flag("--no-cdar", o.no_cdar, "Disable attention refinement");
    sub.add_option("--seed", o.seed, "Sampling and distortion seed")->capture_default_str();
    sub.add_option("--max-new-tokens", o.max_new_tokens, "Default 1 for yes/no probes, else 16");
    sub.add_option("--temperature", o.temperature, "Sample at this temperature instead of greedy");
    sub.add_option("--eos", o.eos, "Stop token")->capture_default_str();
    sub.add_flag("--no-eos", o.no_eos, "Never stop early");
    sub.add_option("--vcd-noise", o.vcd_noise, "Patch noise for vcd-lite")->capture_default_str();
    sub.add_option("--icd-prefix", o.icd_prefix, "Comma-separated prefix words for icd-lite")->capture_default_str();
    sub.add_option("--dump-traces", o.dump_traces, "Write per-step layer summaries as JSONL");
    sub.add_option("--out", o.out, "Output JSONL")->required();
}

struct GenerationItem {
    std::string id;
    Prompt prompt;
    std::optional<synth::Probe> probe;
};

Prompt prompt_from_json(const json& j, const std::string& where) {
    if (j.value("schema", "") != kPromptSchema) throw DataError(where + ": expected schema " + kPromptSchema);
    return with_field_errors(where, [&] {
        Prompt p;
        p.text_tokens = j.at("text_tokens").get<std::vector<TokenId>>();
        const auto& rows = j.at("image_patches");
        std::size_t cols = rows.empty() ? 0 : rows.at(0).size();
        p.image_patches = Matrix(rows.size(), cols);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto row = rows.at(r).get<std::vector<float>>();
            if (row.size() != cols) throw DataError(where + ": ragged image_patches");
            std::copy(row.begin(), row.end(), p.image_patches.row(r).begin());
        }
        const auto& l = j.at("layout");
        p.layout = {l.at("system_len").get<std::size_t>(), l.at("image_len").get<std::size_t>(),
                    l.at("text_len").get<std::size_t>()};
        try {
            p.layout.validate();
        } catch (const Error& e) {
            throw DataError(where + ": " + e.what());
        }
        if (p.text_tokens.size() != p.layout.text_len || p.image_patches.rows() != p.layout.image_len)
            throw DataError(where + ": prompt sizes disagree with its layout");
        return p;
    });
}

std::vector<GenerationItem> load_prompts(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<json> records;
    const std::string head = trim(text.substr(0, text.find('\n')));
    if (!head.empty() && head.front() == '{' && head.back() == '}') {
        records = read_jsonl(path);
    } else {
        records.push_back(parse_json(text, path));
    }
    std::vector<GenerationItem> items;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string where = path + " record " + std::to_string(i + 1);
        GenerationItem item;
        item.id = records[i].value("id", "prompt-" + std::to_string(i));
        item.prompt = prompt_from_json(records[i], where);
        items.push_back(std::move(item));
    }
    return items;
}

synth::World load_world(const std::string& path, Run& run) {
    run.input(path);
    return synth::world_from_jsonl(read_file(path));
}

std::vector<synth::Probe> load_probes(const std::string& path, Run& run) {
    run.input(path);
    std::vector<synth::Probe> probes;
    for (const auto& j : read_jsonl(path)) probes.push_back(synth::probe_from_json(j));
    return probes;
}

bool is_yes_no(const std::optional<synth::Probe>& p) { return p && p->kind != synth::ProbeKind::caption; }

int cmd_generate(const GenerateOptions& o, Run& run, std::ostream& out) {
    if (o.prompt.empty() == o.probes.empty()) throw UsageError("give exactly one of --prompt or --probes");
    if (!o.probes.empty() && o.world.empty()) throw UsageError("--probes needs --world");

    run.input(o.weights);
    const ModelWeights weights = load_weights(o.weights);

    std::optional<synth::World> world;
    if (!o.world.empty()) world = load_world(o.world, run);
    const synth::Vocabulary vocab = world ? world->vocab : synth::Vocabulary{};

    std::vector<GenerationItem> items;
    if (!o.prompt.empty()) {
        run.input(o.prompt);
        items = load_prompts(o.prompt);
    } else {
        for (auto& p : load_probes(o.probes, run)) {
            GenerationItem item;
            item.id = p.probe_id;
            item.prompt = synth::probe_prompt(*world, p);
            item.probe = std::move(p);
            items.push_back(std::move(item));
        }
    }
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (std::size_t i = 1; i < items.size(); ++i)
        if (items[i].id == items[i - 1].id) throw DataError("duplicate item id '" + items[i].id + "'");

    DecodeConfig base;
    base.method = parse_method(o.method);
    if (o.no_cdar && base.method == Method::cmved_cdar) base.method = Method::cmved;
    base.beta = o.beta;
    if (!base.beta && o.beta_option && o.beta_option->count()) base.beta = kDefaultBeta;
    base.cdar = {o.gamma, o.cdar_layers};
    if (o.temperature) {
        base.mode = SamplingMode::temperature;
        base.temperature = *o.temperature;
    }
    if (!o.no_eos) base.eos_token = o.eos;
    base.vcd_noise_scale = o.vcd_noise;
    for (const auto& w : split(o.icd_prefix, ',')) {
        const auto id = synth::function_word_id(w);
        if (!id) throw ConfigError("--icd-prefix: unknown word '" + w + "'");
        base.icd_prefix.push_back(*id);
    }
    base.collect_traces = !o.dump_traces.empty();

    std::vector<json> records, traces;
    CostCounters total_original, total_distorted;
    std::size_t total_steps = 0;
    for (const auto& item : items) {
        DecodeConfig cfg = base;
        cfg.alpha = o.alpha.value_or(is_yes_no(item.probe) ? 3.0 : 1.0);
        cfg.max_new_tokens = o.max_new_tokens.value_or(is_yes_no(item.probe) ? 1 : 16);
        const std::uint64_t item_seed = derive_seed(o.seed, fnv1a64(item.id));
        cfg.seed = item_seed;
        cfg.vcd_seed = derive_seed(item_seed, 1);
        const GenerationResult result = generate(weights, item.prompt, cfg);

        json rec = {{"schema", kGenerationSchema}, {"id", item.id}, {"method", to_string(cfg.method)},
                    {"alpha", cfg.alpha}};
        rec["tokens"] = result.tokens;
        rec["text"] = vocab.detokenize(result.tokens);
        std::vector<double> ent;
        std::vector<std::uint64_t> dist_forwards;
        for (const auto& s : result.steps) {
            ent.push_back(s.entropy);
            dist_forwards.push_back(s.distorted_cost.token_forwards);
        }
        rec["per_step_entropy"] = ent;
        rec["cost_counters"] = {{"original", cost_json(result.original_cost)},
                                {"distorted", cost_json(result.distorted_cost)},
                                {"distorted_token_forwards_per_step", dist_forwards}};
        if (item.probe) {
            const auto& p = *item.probe;
            rec["kind"] = to_string(p.kind);
            rec["strategy"] = to_string(p.strategy);
            rec["image_id"] = p.image_id;
            if (p.kind != synth::ProbeKind::caption) {
                rec["object"] = p.object;
                rec["label"] = p.label_yes ? "yes" : "no";
                const Answer a =
                    result.tokens.empty() ? Answer::invalid : parse_answer(vocab.word(result.tokens.front()));
                rec["answer"] = to_string(a);
            }
            if (p.kind == synth::ProbeKind::mme) rec["question_id"] = p.question_id;
        }
        records.push_back(std::move(rec));

        if (cfg.collect_traces) {
            for (std::size_t s = 0; s < result.steps.size(); ++s) {
                json layers = json::array();
                for (std::size_t l = 0; l < result.steps[s].trace.size(); ++l)
                    layers.push_back({{"layer", l},
                                      {"mask_density", result.steps[s].trace[l].mask_density},
                                      {"cross_logit_mean", result.steps[s].trace[l].cross_logit_mean}});
                traces.push_back({{"schema", kTraceSchema}, {"id", item.id}, {"step", s}, {"layers", layers}});
            }
        }
        total_original += result.original_cost;
        total_distorted += result.distorted_cost;
        total_steps += result.steps.size();
    }

    run.output(o.out, to_jsonl(records));
    if (!o.dump_traces.empty()) run.output(o.dump_traces, to_jsonl(traces));
    run.manifest.seeds = {{"decode", o.seed}};
    run.counters = {{"items", items.size()},
                    {"steps", total_steps},
                    {"original", cost_json(total_original)},
                    {"distorted", cost_json(total_distorted)}};
    out << "generated " << items.size() << " item(s), " << total_steps << " step(s) -> " << o.out << "\n";
    return kOk;
}

// --------------------------------------------------------------- evaluation

struct EvalOptions {
    std::string input;
    std::string out;
    std::string csv;
    std::string world;
    std::string cooc;
    double threshold = 0.70;
    std::size_t top_pairs = 4;
};

void add_eval_common(CLI::App& sub, EvalOptions& o) {
    sub.add_option("--input", o.input, "Generation or item JSONL")->required();
    sub.add_option("--out", o.out, "Report JSON")->required();
}

bool skip_kind(const json& r, std::string_view kind) { return r.contains("kind") && r["kind"] != kind; }

bool label_of(const json& r) {
    if (r.contains("label_yes")) return r.at("label_yes").get<bool>();
    const Answer a = parse_answer(r.at("label").get<std::string>());
    if (a == Answer::invalid) throw DataError("label must be yes or no");
    return a == Answer::yes;
}

std::vector<PopeItem> pope_items(const std::vector<json>& records, const std::string& path) {
    std::vector<std::pair<std::string, PopeItem>> keyed;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (skip_kind(r, "pope")) continue;
        with_field_errors(path + " record " + std::to_string(i + 1), [&] {
            PopeItem item;
            item.image_id = r.at("image_id").get<std::string>();
            item.object = r.at("object").get<std::string>();
            item.label_yes = label_of(r);
            item.answer = parse_answer(r.at("answer").get<std::string>());
            keyed.emplace_back(r.value("id", item.image_id + "/" + item.object), std::move(item));
        });
    }
    std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<PopeItem> items;
    for (auto& [k, v] : keyed) items.push_back(std::move(v));
    return items;
}

int cmd_pope_eval(const EvalOptions& o, Run& run, std::ostream& out) {
    run.input(o.input);
    const auto items = pope_items(read_jsonl(o.input), o.input);
    if (items.empty()) throw DataError(o.input + ": no POPE records");
    const PopeReport r = pope_metrics(items);
    const auto& c = r.counts;
    const json report = {
        {"schema", "imccd.pope_report.v1"},
        {"items", c.total()},
        {"counts",
         {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}, {"invalid_on_yes", c.invalid_on_yes},
          {"invalid_on_no", c.invalid_on_no}}},
        {"accuracy", ratio_json(r.accuracy)},
        {"precision", ratio_json(r.precision)},
        {"recall", ratio_json(r.recall)},
        {"f1", ratio_json(r.f1)},
        {"invalid_rate", ratio_json(r.invalid_rate)},
        {"yes_ratio", ratio_json(r.yes_ratio)},
    };
    run.output(o.out, report.dump(2) + "\n");
    if (!o.csv.empty()) {
        std::string csv = "metric,num,den,value\n";
        const std::pair<const char*, std::optional<Ratio>> rows[] = {
            {"accuracy", r.accuracy}, {"precision", r.precision},       {"recall", r.recall},
            {"f1", r.f1},             {"invalid_rate", r.invalid_rate}, {"yes_ratio", r.yes_ratio}};
        for (const auto& [name, v] : rows) csv += std::string(name) + "," + csv_field(v) + "\n";
        run.output(o.csv, csv);
    }
    run.counters = {{"items", c.total()}};
    out << "pope: accuracy " << r.accuracy.value() << ", f1 " << (r.f1 ? r.f1->value() : 0.0) << " over "
        << c.total() << " items\n";
    return kOk;
}

// Splits generated tokens into sentences at the period token and lists the
// object words of each; stops at end-of-sequence.
std::vector<std::vector<std::string>> caption_mentions(const synth::Vocabulary& vocab,
                                                       const std::vector<TokenId>& tokens) {
    std::vector<std::vector<std::string>> sentences;
    std::vector<std::string> current;
    bool open = false;
    for (TokenId t : tokens) {
        if (t == synth::kEos) break;
        if (t == synth::kPeriod) {
            if (open) sentences.push_back(std::move(current));
            current.clear();
            open = false;
            continue;
        }
        open = true;
        if (auto obj = vocab.object_of(t)) current.push_back(vocab.objects[*obj]);
    }
    if (open) sentences.push_back(std::move(current));
    return sentences;
}

int cmd_chair_eval(const EvalOptions& o, Run& run, std::ostream& out) {
    run.input(o.input);
    const auto records = read_jsonl(o.input);
    std::optional<synth::World> world;
    if (!o.world.empty()) world = load_world(o.world, run);

    std::vector<std::pair<std::string, ChairItem>> keyed;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        const std::string where = o.input + " record " + std::to_string(i + 1);
        with_field_errors(where, [&] {
            ChairItem item;
            item.image_id = r.at("image_id").get<std::string>();
            if (r.contains("sentences")) {
                item.sentences = r.at("sentences").get<std::vector<std::vector<std::string>>>();
                item.ground_truth = r.at("ground_truth").get<std::set<std::string>>();
            } else {
                if (skip_kind(r, "caption") || !r.contains("tokens")) return;
                if (!world) throw UsageError("caption generations need --world for ground truth");
                item.sentences = caption_mentions(world->vocab, r.at("tokens").get<std::vector<TokenId>>());
                for (std::size_t obj : world->scene(item.image_id).objects)
                    item.ground_truth.insert(world->vocab.objects[obj]);
            }
            keyed.emplace_back(r.value("id", item.image_id), std::move(item));
        });
    }
    if (keyed.empty()) throw DataError(o.input + ": no caption records");
    std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<ChairItem> items;
    for (auto& [k, v] : keyed) items.push_back(std::move(v));

    const ChairReport r = chair_metrics(items);
    const json report = {
        {"schema", "imccd.chair_report.v1"},
        {"items", items.size()},
        {"mentions", r.mentions},
        {"hallucinated", r.hallucinated},
        {"sentences", r.sentences},
        {"hallucinated_sentences", r.hallucinated_sentences},
        {"gt_objects", r.gt_objects},
        {"gt_mentioned", r.gt_mentioned},
        {"chair_i", ratio_json(r.chair_i)},
        {"chair_s", ratio_json(r.chair_s)},
        {"recall", ratio_json(r.recall)},
        {"f1", ratio_json(r.f1)},
    };
    run.output(o.out, report.dump(2) + "\n");
    if (!o.csv.empty()) {
        std::string csv = "metric,num,den,value\n";
        const std::pair<const char*, std::optional<Ratio>> rows[] = {
            {"chair_i", r.chair_i}, {"chair_s", r.chair_s}, {"recall", r.recall}, {"f1", r.f1}};
        for (const auto& [name, v] : rows) csv += std::string(name) + "," + csv_field(v) + "\n";
        run.output(o.csv, csv);
    }
    run.counters = {{"items", items.size()}};
    out << "chair: " << items.size() << " captions, " << r.mentions << " mentions, " << r.hallucinated
        << " hallucinated\n";
    return kOk;
}

int cmd_mme_eval(const EvalOptions& o, Run& run, std::ostream& out) {
    run.input(o.input);
    const auto records = read_jsonl(o.input);
    std::vector<MmeItem> items;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (skip_kind(r, "mme")) continue;
        with_field_errors(o.input + " record " + std::to_string(i + 1), [&] {
            MmeItem item;
            item.image_id = r.at("image_id").get<std::string>();
            item.question_id = r.at("question_id").get<std::string>();
            if (r.contains("correct")) {
                item.correct = r.at("correct").get<bool>();
            } else {
                const Answer a = parse_answer(r.at("answer").get<std::string>());
                item.correct = a != Answer::invalid && (a == Answer::yes) == label_of(r);
            }
            items.push_back(std::move(item));
        });
    }
    if (items.empty()) throw DataError(o.input + ": no MME records");
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        return std::tie(a.image_id, a.question_id) < std::tie(b.image_id, b.question_id);
    });
    const MmeReport r = mme_score(items);
    const json report = {
        {"schema", "imccd.mme_report.v1"},
        {"questions", r.questions},
        {"correct", r.correct},
        {"images", r.images},
        {"images_both_correct", r.images_both_correct},
        {"acc", ratio_json(r.acc)},
        {"acc_plus", ratio_json(r.acc_plus)},
        {"score", ratio_json(r.score)},
    };
    run.output(o.out, report.dump(2) + "\n");
    if (!o.csv.empty())
        run.output(o.csv, "metric,num,den,value\nacc," + csv_field(r.acc) + "\nacc_plus," + csv_field(r.acc_plus) +
                              "\nscore," + csv_field(r.score) + "\n");
    run.counters = {{"questions", r.questions}};
    out << "mme: score " << r.score.value() << " over " << r.images << " images\n";
    return kOk;
}

json group_json(const RateGroup& g) {
    return {{"absent", g.absent},
            {"yes_on_absent", g.yes_on_absent},
            {"present", g.present},
            {"no_on_present", g.no_on_present},
            {"fpr_on_absent", ratio_json(g.fpr_on_absent)},
            {"fnr_on_present", ratio_json(g.fnr_on_present)}};
}

int cmd_cooc_analyze(const EvalOptions& o, Run& run, std::ostream& out) {
    run.input(o.input);
    const auto items = pope_items(read_jsonl(o.input), o.input);
    if (items.empty()) throw DataError(o.input + ": no POPE records");
    const synth::World world = load_world(o.world, run);
    CoocStats cooc = world.cooc;
    if (!o.cooc.empty()) {
        run.input(o.cooc);
        cooc = synth::cooc_from_json(parse_json(read_file(o.cooc), o.cooc));
    }
    const auto image_objects = world.image_objects();
    const CoocReport r = cooc_hallucination_rates(items, cooc, image_objects, o.threshold);
    json report = {{"schema", "imccd.cooc_report.v1"},
                   {"threshold", r.threshold},
                   {"qualifying", group_json(r.qualifying)},
                   {"complement", group_json(r.complement)}};
    if (o.top_pairs > 0) {
        const TopPairsReport top = top_pair_rates(items, cooc, image_objects, o.top_pairs);
        json pairs = json::array();
        for (const auto& p : top.pairs)
            pairs.push_back({{"object", p.object},
                             {"partner", p.partner},
                             {"co_existence", p.co_existence},
                             {"rates", group_json(p.group)}});
        report["top_pairs"] = {{"pairs", pairs},
                               {"mean_fpr_on_absent", top.mean_fpr_on_absent ? json(*top.mean_fpr_on_absent) : json()},
                               {"mean_fnr_on_present",
                                top.mean_fnr_on_present ? json(*top.mean_fnr_on_present) : json()}};
    }
    run.output(o.out, report.dump(2) + "\n");
    if (!o.csv.empty()) {
        std::string csv = "group,absent,yes_on_absent,present,no_on_present\n";
        for (const auto& [name, g] : {std::pair{"qualifying", r.qualifying}, std::pair{"complement", r.complement}})
            csv += std::string(name) + "," + std::to_string(g.absent) + "," + std::to_string(g.yes_on_absent) + "," +
                   std::to_string(g.present) + "," + std::to_string(g.no_on_present) + "\n";
        run.output(o.csv, csv);
    }
    run.counters = {{"items", items.size()}};
    out << "cooc: qualifying yes-on-absent " << r.qualifying.yes_on_absent << "/" << r.qualifying.absent
        << ", complement " << r.complement.yes_on_absent << "/" << r.complement.absent << "\n";
    return kOk;
}

// ------------------------------------------------------ oracle-check, bench

Prompt random_prompt(const ModelConfig& cfg, const TokenLayout& layout, std::uint64_t seed) {
    Rng rng(seed);
    Prompt p;
    p.layout = layout;
    for (std::size_t i = 0; i < layout.text_len; ++i) p.text_tokens.push_back(TokenId(rng.below(cfg.vocab_size)));
    p.image_patches = Matrix(layout.image_len, cfg.patch_dim);
    for (float& v : p.image_patches.flat()) v = float(rng.normal());
    return p;
}

std::vector<Method> parse_methods(const std::string& list) {
    std::vector<Method> out;
    for (const auto& m : split(list, ',')) out.push_back(parse_method(m));
    if (out.empty()) throw ConfigError("--methods is empty");
    return out;
}

struct OracleOptions {
    std::string weights;
    std::uint64_t seed = 0;
    std::size_t seeds = 3;
    std::size_t steps = 8;
    std::string methods = "baseline,cmved,cmved+cdar";
    double alpha = 1.0;
    std::string out;
};

void add_oracle(CLI::App& sub, OracleOptions& o) {
    sub.add_option("--weights", o.weights, "Weight file (random weights per seed when unset)");
    sub.add_option("--seed", o.seed, "Base seed")->capture_default_str();
    sub.add_option("--seeds", o.seeds, "Number of random instances")->capture_default_str();
    sub.add_option("--steps", o.steps, "Generated tokens per instance")->capture_default_str();
    sub.add_option("--methods", o.methods, "Comma-separated methods")->capture_default_str();
    sub.add_option("--alpha", o.alpha, "Contrast strength")->capture_default_str();
    sub.add_option("--out", o.out, "Report JSON (stdout when unset)");
}

json divergence_json(const std::optional<oracle::Divergence>& d) {
    if (!d) return nullptr;
    return {{"step", d->step},
            {"branch", d->branch},
            {"layer", d->layer ? json(*d->layer) : json()},
            {"position", d->position},
            {"expected", d->expected},
            {"actual", d->actual}};
}

int cmd_oracle_check(const OracleOptions& o, Run& run, std::ostream& out) {
    const auto methods = parse_methods(o.methods);
    std::optional<ModelWeights> fixed;
    if (!o.weights.empty()) {
        run.input(o.weights);
        fixed = load_weights(o.weights);
    }
    const ModelConfig cfg = fixed ? fixed->config : ModelConfig{};
    const TokenLayout layout{3, 8, 10};

    bool pass = true;
    json cases = json::array();
    for (std::size_t s = 0; s < o.seeds; ++s) {
        const std::uint64_t base = derive_seed(o.seed, s);
        const ModelWeights weights = fixed ? *fixed : random_weights(cfg, base, 1.0);
        const Prompt prompt = random_prompt(cfg, layout, derive_seed(base, 1));
        for (Method m : methods) {
            DecodeConfig dc;
            dc.method = m;
            dc.alpha = o.alpha;
            dc.max_new_tokens = o.steps;
            const auto rep = oracle::compare_generation(weights, prompt, dc, std::string(to_string(m)));
            pass = pass && rep.pass;
            cases.push_back({{"method", rep.label},
                             {"seed", s},
                             {"steps", rep.steps},
                             {"pass", rep.pass},
                             {"tokens_match", rep.tokens_match},
                             {"compared_values", rep.compared_values},
                             {"max_abs_diff", rep.max_abs_diff},
                             {"max_rel_diff", rep.max_rel_diff},
                             {"per_layer_max_rel", rep.per_layer_max_rel},
                             {"first_divergence", divergence_json(rep.first_divergence)},
                             {"engine_cost", cost_json(rep.engine_cost)},
                             {"oracle_cost", cost_json(rep.oracle_cost)}});
        }
    }
    const json report = {{"schema", "imccd.oracle_report.v1"},
                         {"pass", pass},
                         {"tolerance", {{"relative", oracle::kRelTolerance}, {"absolute_floor", oracle::kAbsFloor}}},
                         {"cases", cases}};
    if (o.out.empty()) {
        out << report.dump(2) << "\n";
    } else {
        run.output(o.out, report.dump(2) + "\n");
        out << "oracle-check: " << (pass ? "pass" : "FAIL") << " (" << cases.size() << " cases)\n";
    }
    run.manifest.seeds = {{"oracle", o.seed}};
    run.counters = {{"cases", cases.size()}, {"pass", pass}};
    return pass ? kOk : kCheckFailed;
}

struct BenchOptions {
    std::string weights;
    std::string methods = "baseline,cmved,vcd-lite";
    std::size_t runs = 5;
    std::size_t max_new_tokens = 8;
    std::uint64_t seed = 0;
    std::string out;
    std::string csv;
};

void add_bench(CLI::App& sub, BenchOptions& o) {
    sub.add_option("--weights", o.weights, "Weight file (seeded random weights when unset)");
    sub.add_option("--methods", o.methods, "Comma-separated methods")->capture_default_str();
    sub.add_option("--runs", o.runs, "Prompts per method")->capture_default_str();
    sub.add_option("--max-new-tokens", o.max_new_tokens, "Generated tokens per run")->capture_default_str();
    sub.add_option("--seed", o.seed, "Prompt and weight seed")->capture_default_str();
    sub.add_option("--out", o.out, "Report JSON")->required();
    sub.add_option("--csv", o.csv, "Also write a CSV summary");
}

int cmd_bench(const BenchOptions& o, Run& run, std::ostream& out) {
    if (o.runs == 0 || o.max_new_tokens == 0) throw ConfigError("--runs and --max-new-tokens must be positive");
    const auto methods = parse_methods(o.methods);
    ModelWeights weights;
    if (!o.weights.empty()) {
        run.input(o.weights);
        weights = load_weights(o.weights);
    } else {
        weights = random_weights(ModelConfig{}, o.seed, 1.0);
    }
    const TokenLayout layout = synth::prompt_layout(16, 14);

    json rows = json::array();
    json wall = json::object();
    std::string csv = "method,runs,steps,token_forwards_per_step,attention_dots_per_step,macs_per_step\n";
    for (Method m : methods) {
        CostCounters total;
        std::size_t steps = 0;
        std::vector<std::uint64_t> distorted_per_step;
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t r = 0; r < o.runs; ++r) {
            const Prompt prompt = random_prompt(weights.config, layout, derive_seed(o.seed, r + 1));
            DecodeConfig dc;
            dc.method = m;
            dc.max_new_tokens = o.max_new_tokens;
            dc.vcd_seed = derive_seed(o.seed, 1000 + r);
            dc.icd_prefix = {synth::function_word_id("<unk>").value(), synth::function_word_id("<unk>").value()};
            const auto res = generate(weights, prompt, dc);
            total += res.original_cost;
            total += res.distorted_cost;
            steps += res.steps.size();
            if (r == 0)
                for (const auto& s : res.steps) distorted_per_step.push_back(s.distorted_cost.token_forwards);
        }
        wall[std::string(to_string(m))] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const auto per = [&](std::uint64_t v) { return double(v) / double(steps); };
        rows.push_back({{"method", to_string(m)},
                        {"runs", o.runs},
                        {"steps", steps},
                        {"total", cost_json(total)},
                        {"per_step",
                         {{"token_forwards", per(total.token_forwards)},
                          {"attention_dots", per(total.attention_dots)},
                          {"macs", per(total.macs)}}},
                        {"distorted_token_forwards_per_step_run0", distorted_per_step}});
        std::ostringstream line;
        line.precision(17);
        line << to_string(m) << ',' << o.runs << ',' << steps << ',' << per(total.token_forwards) << ','
             << per(total.attention_dots) << ',' << per(total.macs) << '\n';
        csv += line.str();
        out << to_string(m) << ": " << per(total.token_forwards) << " token-forwards/step, " << per(total.macs)
            << " MACs/step\n";
    }
    const json report = {{"schema", "imccd.bench.v1"},
                         {"max_new_tokens", o.max_new_tokens},
                         {"layout", {{"system_len", layout.system_len}, {"image_len", layout.image_len},
                                     {"text_len", layout.text_len}}},
                         {"methods", rows}};
    run.output(o.out, report.dump(2) + "\n");
    if (!o.csv.empty()) run.output(o.csv, csv);
    run.manifest.seeds = {{"bench", o.seed}};
    run.counters = {{"wall_seconds_per_method", wall}};
    return kOk;
}

// ------------------------------------------------------------------ driver

int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::usage:
        case ErrorKind::config: return kUsage;
        case ErrorKind::data:
        case ErrorKind::format:
        case ErrorKind::input: return kData;
        default: return kInternal;
    }
}

std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    if (args.empty() || args[0].starts_with("-")) return args;
    std::vector<std::string> file_args, rest;
    for (std::size_t i = 1; i < args.size(); ++i) {
        const auto& a = args[i];
        if (a == "--config") {
            if (i + 1 >= args.size()) throw UsageError("--config needs a file");
            auto more = config_file_args(args[++i]);
            file_args.insert(file_args.end(), more.begin(), more.end());
        } else if (a.starts_with("--config=")) {
            auto more = config_file_args(a.substr(9));
            file_args.insert(file_args.end(), more.begin(), more.end());
        } else {
            rest.push_back(a);
        }
    }
    std::vector<std::string> out{args[0]};
    out.insert(out.end(), file_args.begin(), file_args.end());
    out.insert(out.end(), rest.begin(), rest.end());
    return out;
}

// Rewrites a recorded argument list so outputs land under `new_out`.
std::vector<std::string> redirect_outputs(const std::vector<std::string>& args, const std::string& new_out) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < args.size(); ++i) {
        const auto& a = args[i];
        if ((a == "--out" || a == "--manifest") && i + 1 < args.size()) {
            if (a == "--out") out.insert(out.end(), {"--out", new_out});
            ++i;
        } else if (a.starts_with("--out=")) {
            out.push_back("--out=" + new_out);
        } else if (!a.starts_with("--manifest=")) {
            out.push_back(a);
        }
    }
    return out;
}

int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    args = expand_config(args);

    CLI::App app{"Contrastive decoding toolkit for a toy vision-language model", "imccd"};
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(0, 1);
    app.set_version_flag("--version", kToolVersion);
    std::string from_manifest, rerun_out;
    app.add_option("--from-manifest", from_manifest, "Replay the command recorded in a run manifest");
    app.add_option("--rerun-out", rerun_out, "With --from-manifest: write outputs here instead");

    std::string manifest_override, config_placeholder;
    const auto common = [&](CLI::App* sub) {
        sub->add_option("--manifest", manifest_override, "Manifest path (default: next to the output)");
        sub->add_option("--config", config_placeholder, "key = value file; explicit flags override it");
        return sub;
    };

    GenWorldOptions gw;
    auto* gen_world = common(app.add_subcommand("gen-world", "Synthesize a world, probes and a biased model"));
    add_gen_world(*gen_world, gw);

    GenerateOptions go;
    auto* gen = common(app.add_subcommand("generate", "Decode prompts or probes"));
    add_generate(*gen, go);

    EvalOptions pope_o, chair_o, mme_o, cooc_o;
    auto* pope = common(app.add_subcommand("pope-eval", "POPE accuracy, precision, recall and F1"));
    add_eval_common(*pope, pope_o);
    pope->add_option("--csv", pope_o.csv, "Also write a CSV summary");

    auto* chair = common(app.add_subcommand("chair-eval", "CHAIR scores for captions"));
    add_eval_common(*chair, chair_o);
    chair->add_option("--world", chair_o.world, "World JSONL, for caption generations");
    chair->add_option("--csv", chair_o.csv, "Also write a CSV summary");

    auto* mme = common(app.add_subcommand("mme-eval", "MME acc, acc+ and score"));
    add_eval_common(*mme, mme_o);
    mme->add_option("--csv", mme_o.csv, "Also write a CSV summary");

    auto* cooc = common(app.add_subcommand("cooc-analyze", "Hallucination rates split by co-occurrence"));
    add_eval_common(*cooc, cooc_o);
    cooc->add_option("--world", cooc_o.world, "World JSONL")->required();
    cooc->add_option("--cooc", cooc_o.cooc, "Co-occurrence table overriding the world's");
    cooc->add_option("--threshold", cooc_o.threshold, "Co-existence threshold")->capture_default_str();
    cooc->add_option("--top-pairs", cooc_o.top_pairs, "Report the k strongest pairs (0 to skip)")
        ->capture_default_str();
    cooc->add_option("--csv", cooc_o.csv, "Also write a CSV summary");

    OracleOptions oo;
    auto* orc = common(app.add_subcommand("oracle-check", "Compare the engine with brute-force recomputation"));
    add_oracle(*orc, oo);

    BenchOptions bo;
    auto* bench = common(app.add_subcommand("bench", "Per-method cost counters"));
    add_bench(*bench, bo);

    std::vector<const char*> argv{"imccd"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(int(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    if (!from_manifest.empty()) {
        if (!app.get_subcommands().empty()) throw UsageError("--from-manifest replaces the subcommand");
        const RunManifest m = RunManifest::from_json(parse_json(read_file(from_manifest), from_manifest));
        std::vector<std::string> replay{m.command};
        const auto recorded = rerun_out.empty() ? m.args : redirect_outputs(m.args, rerun_out);
        replay.insert(replay.end(), recorded.begin(), recorded.end());
        return dispatch(replay, out, err);
    }
    if (app.get_subcommands().empty()) {
        out << app.help();
        return kUsage;
    }

    CLI::App* sub = app.get_subcommands().front();
    Run run;
    run.manifest.command = sub->get_name();
    run.manifest.args.assign(args.begin() + 1, args.end());
    run.manifest.resolved_config = sub->config_to_str(true, false);

    std::string out_path;
    std::function<int()> body;
    if (sub == gen_world) {
        out_path = (fs::path(gw.out) / "manifest.json").string();
        body = [&] { return cmd_gen_world(gw, run, out); };
    } else if (sub == gen) {
        out_path = go.out + ".manifest.json";
        body = [&] { return cmd_generate(go, run, out); };
    } else if (sub == pope) {
        out_path = pope_o.out + ".manifest.json";
        body = [&] { return cmd_pope_eval(pope_o, run, out); };
    } else if (sub == chair) {
        out_path = chair_o.out + ".manifest.json";
        body = [&] { return cmd_chair_eval(chair_o, run, out); };
    } else if (sub == mme) {
        out_path = mme_o.out + ".manifest.json";
        body = [&] { return cmd_mme_eval(mme_o, run, out); };
    } else if (sub == cooc) {
        out_path = cooc_o.out + ".manifest.json";
        body = [&] { return cmd_cooc_analyze(cooc_o, run, out); };
    } else if (sub == orc) {
        if (!oo.out.empty()) out_path = oo.out + ".manifest.json";
        body = [&] { return cmd_oracle_check(oo, run, out); };
    } else {
        out_path = bo.out + ".manifest.json";
        body = [&] { return cmd_bench(bo, run, out); };
    }
    if (!manifest_override.empty()) out_path = manifest_override;

    const auto t0 = std::chrono::steady_clock::now();
    const int code = body();
    run.manifest.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.manifest.counters = run.counters;
    if (!out_path.empty()) write_file(out_path, run.manifest.to_json().dump(2) + "\n");
    if (!run.manifest.seeds.empty()) err << "seeds: " << seed_list(run.manifest.seeds) << "\n";
    return code;
}

}  // namespace

std::vector<std::string> config_file_args(const std::string& path) {
    const std::string text = read_file(path);
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        const std::string key = trim(line.substr(0, eq));
        const bool key_ok = !key.empty() && std::all_of(key.begin(), key.end(), [](char c) {
            return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '_';
        });
        if (eq == std::string::npos || !key_ok)
            throw ConfigError(path + ":" + std::to_string(n) + ": expected 'key = value'");
        std::string value = trim(line.substr(eq + 1));
        if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        if (value == "true") {
            out.push_back(flag);
        } else if (value != "false") {
            out.push_back(flag + "=" + value);
        }
    }
    return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    try {
        return dispatch(args, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}

int run(int argc, char** argv) {
    return run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}

}  // namespace imccd::cli
