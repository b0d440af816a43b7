#include "imccd/synth.hpp"

#include "imccd/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace imccd::synth {

using nlohmann::json;

const std::vector<std::string>& function_words() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w = {"<bos>", "<eos>", "yes",  "no",     ".",   "?",        "user",  ":",
                                      "is",    "there", "a",    "in",     "the", "image",    "please", "answer",
                                      "one",   "word",  "describe", "and", "with", "an", "<unk>"};
        for (std::size_t i = w.size(); i < kObjectBase; ++i) w.push_back("<w" + std::to_string(i) + ">");
        return w;
    }();
    return words;
}

std::optional<TokenId> function_word_id(std::string_view word) {
    const auto& w = function_words();
    auto it = std::find(w.begin(), w.end(), word);
    if (it == w.end()) return std::nullopt;
    return TokenId(it - w.begin());
}

namespace {

TokenId fw(std::string_view word) {
    auto id = function_word_id(word);
    if (!id) throw InternalError("missing function word '" + std::string(word) + "'");
    return *id;
}

}  // namespace

std::optional<std::size_t> Vocabulary::object_of(TokenId token) const {
    if (token < kObjectBase || token - kObjectBase >= objects.size()) return std::nullopt;
    return std::size_t(token - kObjectBase);
}

std::string Vocabulary::word(TokenId token) const {
    if (token < kObjectBase) return function_words()[token];
    if (auto o = object_of(token)) return objects[*o];
    return "<tok" + std::to_string(token) + ">";
}

std::string Vocabulary::detokenize(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId t : tokens) {
        if (!out.empty()) out += ' ';
        out += word(t);
    }
    return out;
}

void WorldSpec::validate() const {
    if (objects.empty()) throw DataError("world needs at least one object");
    if (objects.size() > kMaxObjects)
        throw DataError("world has " + std::to_string(objects.size()) + " objects; the patch encoding holds " +
                        std::to_string(kMaxObjects));
    std::set<std::string> names(objects.begin(), objects.end());
    if (names.size() != objects.size()) throw DataError("object names must be unique");
    for (const auto& n : objects)
        if (function_word_id(n)) throw DataError("object name '" + n + "' collides with a function word");
    if (base_rate.size() != objects.size()) throw DataError("base_rate needs one entry per object");
    for (std::size_t i = 0; i < base_rate.size(); ++i)
        if (!(base_rate[i] >= 0.0 && base_rate[i] <= 1.0))
            throw DataError("base rate of '" + objects[i] + "' outside [0, 1]");
    std::set<std::size_t> anchors, dependents;
    for (const auto& c : correlations) {
        if (c.anchor >= objects.size() || c.dependent >= objects.size())
            throw DataError("correlation references an unknown object index");
        if (c.anchor == c.dependent) throw DataError("object '" + objects[c.anchor] + "' cannot depend on itself");
        if (!(c.given_anchor >= 0.0 && c.given_anchor <= 1.0))
            throw DataError("target P(" + objects[c.dependent] + " | " + objects[c.anchor] + ") outside [0, 1]");
        if (!dependents.insert(c.dependent).second)
            throw DataError("'" + objects[c.dependent] + "' has more than one anchor; the joint is not determined");
        anchors.insert(c.anchor);
    }
    for (std::size_t a : anchors)
        if (dependents.count(a))
            throw DataError("'" + objects[a] + "' is both an anchor and a dependent; chained targets are not supported");
    if (image_tokens < objects.size())
        throw DataError("image_tokens (" + std::to_string(image_tokens) +
                        ") cannot give every object a patch when all are present");
    if (patch_dim < 16) throw DataError("patch_dim must be at least 16");
    if (patches_per_object == 0) throw DataError("patches_per_object must be positive");
    if (n_scenes == 0) throw DataError("n_scenes must be positive");
    if (!(patch_noise >= 0.0)) throw DataError("patch_noise must be non-negative");
}

WorldSpec default_world_spec(std::uint64_t seed, std::size_t n_scenes) {
    WorldSpec s;
    s.objects = {"table", "food", "road", "car", "dog", "frisbee", "bed", "pillow", "tree", "person", "cup", "book"};
    s.base_rate = {0.45, 0.05, 0.45, 0.05, 0.45, 0.05, 0.45, 0.05, 0.3, 0.3, 0.3, 0.3};
    s.correlations = {{0, 1, 0.85}, {2, 3, 0.85}, {4, 5, 0.85}, {6, 7, 0.85}};
    s.n_scenes = n_scenes;
    s.seed = seed;
    return s;
}

const Scene& World::scene(std::string_view id) const {
    for (const auto& s : scenes)
        if (s.id == id) return s;
    throw InputError("unknown image id '" + std::string(id) + "'");
}

std::map<std::string, std::set<std::string>> World::image_objects() const {
    std::map<std::string, std::set<std::string>> out;
    for (const auto& s : scenes) {
        auto& names = out[s.id];
        for (std::size_t o : s.objects) names.insert(spec.objects[o]);
    }
    return out;
}

std::vector<float> clean_patch(int object, std::size_t patch_dim) {
    std::vector<float> p(patch_dim, 0.0f);
    if (object >= 0) {
        p[std::size_t(object)] = 1.0f;
        p[12] = 1.0f;
    } else {
        p[13] = 1.0f;
    }
    p[15] = 1.0f;
    return p;
}

namespace {

std::string scene_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%05zu", i);
    return buf;
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

Scene make_scene(const WorldSpec& spec, std::size_t index) {
    Rng rng(derive_seed(spec.seed, index));
    const std::size_t k = spec.objects.size();
    std::vector<int> anchor_of(k, -1);
    for (const auto& c : spec.correlations) anchor_of[c.dependent] = int(c.anchor);
    std::vector<double> given(k, 0.0);
    for (const auto& c : spec.correlations) given[c.dependent] = c.given_anchor;

    Scene s;
    s.id = scene_id(index);
    // Independent objects first, then dependents, each with its own draw.
    std::vector<bool> present(k, false);
    for (std::size_t o = 0; o < k; ++o)
        if (anchor_of[o] < 0) present[o] = rng.uniform() < spec.base_rate[o];
    for (std::size_t o = 0; o < k; ++o)
        if (anchor_of[o] >= 0) present[o] = rng.uniform() < (present[std::size_t(anchor_of[o])] ? given[o] : spec.base_rate[o]);
    for (std::size_t o = 0; o < k; ++o)
        if (present[o]) s.objects.insert(o);

    s.slots.assign(spec.image_tokens, -1);
    if (!s.objects.empty()) {
        const std::size_t per = std::max<std::size_t>(1, std::min(spec.patches_per_object, spec.image_tokens / s.objects.size()));
        std::size_t slot = 0;
        for (std::size_t o : s.objects)
            for (std::size_t r = 0; r < per; ++r) s.slots[slot++] = int(o);
        shuffle(s.slots, rng);
    }
    s.patches = Matrix(spec.image_tokens, spec.patch_dim);
    for (std::size_t r = 0; r < spec.image_tokens; ++r) {
        auto base = clean_patch(s.slots[r], spec.patch_dim);
        for (std::size_t c = 0; c < spec.patch_dim; ++c) {
            double v = base[c];
            if (c < 14 && spec.patch_noise > 0.0) v += spec.patch_noise * rng.normal();
            s.patches(r, c) = float(v);
        }
    }
    return s;
}

}  // namespace

World gen_world(const WorldSpec& spec) {
    spec.validate();
    World w;
    w.spec = spec;
    w.vocab.objects = spec.objects;
    w.scenes.reserve(spec.n_scenes);
    for (std::size_t i = 0; i < spec.n_scenes; ++i) w.scenes.push_back(make_scene(spec, i));
    std::vector<std::set<std::size_t>> present;
    for (const auto& s : w.scenes) present.push_back(s.objects);
    w.cooc = CoocStats::from_scenes(spec.objects, present);
    return w;
}

std::string_view to_string(ProbeKind k) {
    switch (k) {
        case ProbeKind::pope: return "pope";
        case ProbeKind::caption: return "caption";
        case ProbeKind::mme: return "mme";
    }
    return "pope";
}

std::string_view to_string(ProbeStrategy s) {
    switch (s) {
        case ProbeStrategy::random: return "random";
        case ProbeStrategy::popular: return "popular";
        case ProbeStrategy::adversarial: return "adversarial";
    }
    return "random";
}

ProbeStrategy parse_strategy(std::string_view s) {
    for (auto v : {ProbeStrategy::random, ProbeStrategy::popular, ProbeStrategy::adversarial})
        if (to_string(v) == s) return v;
    throw ConfigError("unknown probe strategy '" + std::string(s) + "'");
}

namespace {

ProbeKind parse_kind(std::string_view s) {
    for (auto v : {ProbeKind::pope, ProbeKind::caption, ProbeKind::mme})
        if (to_string(v) == s) return v;
    throw DataError("unknown probe kind '" + std::string(s) + "'");
}

std::vector<TokenId> system_prompt() { return {kBos, fw("user"), fw(":")}; }

}  // namespace

std::vector<TokenId> pope_question(const Vocabulary& vocab, std::size_t object, bool one_word) {
    std::vector<TokenId> t = system_prompt();
    for (auto w : {"is", "there", "a"}) t.push_back(fw(w));
    t.push_back(vocab.object_token(object));
    for (auto w : {"in", "the", "image", "?"}) t.push_back(fw(w));
    if (one_word)
        for (auto w : {"please", "answer", "in", "one", "word", "."}) t.push_back(fw(w));
    return t;
}

TokenLayout prompt_layout(std::size_t image_tokens, std::size_t text_len) {
    TokenLayout l{kSystemLen, image_tokens, text_len};
    l.validate();
    return l;
}

std::vector<Probe> emit_probes(const World& world, ProbeStrategy strategy, const ProbeTemplate& tmpl,
                               std::uint64_t seed) {
    const auto& spec = world.spec;
    const std::size_t k = spec.objects.size();
    std::vector<Probe> out;
    for (std::size_t si = 0; si < world.scenes.size(); ++si) {
        const Scene& scene = world.scenes[si];
        Rng rng(derive_seed(seed, si));
        std::vector<std::size_t> pos(scene.objects.begin(), scene.objects.end());
        std::vector<std::size_t> absent;
        for (std::size_t o = 0; o < k; ++o)
            if (!scene.objects.count(o)) absent.push_back(o);
        shuffle(pos, rng);
        std::vector<std::size_t> neg = absent;
        shuffle(neg, rng);

        std::vector<std::size_t> ranked;  // negatives in strategy order
        if (strategy == ProbeStrategy::random) {
            ranked = neg;
        } else if (strategy == ProbeStrategy::popular) {
            ranked = absent;
            std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) {
                return world.cooc.support[a] > world.cooc.support[b];
            });
        } else {
            std::vector<std::pair<double, std::size_t>> cand;
            for (std::size_t y : absent) {
                double best = -1.0;
                for (std::size_t x : scene.objects)
                    if (world.cooc.partner[x] == y) best = std::max(best, world.cooc.rate(x, y));
                if (best >= 0.0) cand.push_back({best, y});
            }
            std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
            for (const auto& c : cand) ranked.push_back(c.second);
        }

        const std::size_t n = std::min({tmpl.pope_per_scene / 2, pos.size(), ranked.size()});
        std::size_t counter = 0;
        auto push_pope = [&](std::size_t object, bool label) {
            Probe p;
            p.probe_id = scene.id + "-p" + std::to_string(counter++);
            p.kind = ProbeKind::pope;
            p.strategy = strategy;
            p.image_id = scene.id;
            p.object = spec.objects[object];
            p.label_yes = label;
            p.text_tokens = pope_question(world.vocab, object, tmpl.one_word_instruction);
            p.layout = prompt_layout(spec.image_tokens, p.text_tokens.size());
            out.push_back(std::move(p));
        };
        for (std::size_t i = 0; i < n; ++i) push_pope(pos[i], true);
        for (std::size_t i = 0; i < n; ++i) push_pope(ranked[i], false);

        if (tmpl.include_captions) {
            Probe p;
            p.probe_id = scene.id + "-c0";
            p.kind = ProbeKind::caption;
            p.strategy = strategy;
            p.image_id = scene.id;
            p.text_tokens = system_prompt();
            for (auto w : {"describe", "the", "image", "."}) p.text_tokens.push_back(fw(w));
            p.layout = prompt_layout(spec.image_tokens, p.text_tokens.size());
            out.push_back(std::move(p));
        }
        if (tmpl.include_mme && !pos.empty() && !neg.empty()) {
            for (int q = 0; q < 2; ++q) {
                Probe p;
                const std::size_t object = q == 0 ? pos.front() : neg.front();
                p.probe_id = scene.id + "-m" + std::to_string(q);
                p.kind = ProbeKind::mme;
                p.strategy = strategy;
                p.image_id = scene.id;
                p.object = spec.objects[object];
                p.label_yes = q == 0;
                p.question_id = "q" + std::to_string(q);
                p.text_tokens = pope_question(world.vocab, object, tmpl.one_word_instruction);
                p.layout = prompt_layout(spec.image_tokens, p.text_tokens.size());
                out.push_back(std::move(p));
            }
        }
    }
    return out;
}

Prompt probe_prompt(const World& world, const Probe& probe) {
    const Scene& s = world.scene(probe.image_id);
    return Prompt{probe.text_tokens, s.patches, probe.layout};
}

// ---- serialization ----

json probe_to_json(const Probe& p) {
    json j;
    j["schema"] = kProbeSchema;
    j["probe_id"] = p.probe_id;
    j["kind"] = to_string(p.kind);
    j["strategy"] = to_string(p.strategy);
    j["image_id"] = p.image_id;
    if (p.kind != ProbeKind::caption) {
        j["object"] = p.object;
        j["label"] = p.label_yes ? "yes" : "no";
    }
    if (p.kind == ProbeKind::mme) j["question_id"] = p.question_id;
    j["text_tokens"] = p.text_tokens;
    j["layout"] = {{"system_len", p.layout.system_len}, {"image_len", p.layout.image_len}, {"text_len", p.layout.text_len}};
    return j;
}

namespace {

void require_schema(const json& j, const char* schema) {
    if (!j.is_object() || !j.contains("schema") || j["schema"] != schema)
        throw DataError(std::string("expected record with schema '") + schema + "'");
}

}  // namespace

Probe probe_from_json(const json& j) {
    require_schema(j, kProbeSchema);
    try {
        Probe p;
        p.probe_id = j.at("probe_id").get<std::string>();
        p.kind = parse_kind(j.at("kind").get<std::string>());
        p.strategy = parse_strategy(j.at("strategy").get<std::string>());
        p.image_id = j.at("image_id").get<std::string>();
        if (p.kind != ProbeKind::caption) {
            p.object = j.at("object").get<std::string>();
            const auto label = j.at("label").get<std::string>();
            if (label != "yes" && label != "no") throw DataError("probe label must be yes or no");
            p.label_yes = label == "yes";
        }
        if (p.kind == ProbeKind::mme) p.question_id = j.at("question_id").get<std::string>();
        p.text_tokens = j.at("text_tokens").get<std::vector<TokenId>>();
        const auto& l = j.at("layout");
        p.layout = {l.at("system_len").get<std::size_t>(), l.at("image_len").get<std::size_t>(),
                    l.at("text_len").get<std::size_t>()};
        p.layout.validate();
        if (p.text_tokens.size() != p.layout.text_len) throw DataError("probe token count disagrees with its layout");
        return p;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed probe record: ") + e.what());
    } catch (const ConfigError& e) {
        throw DataError(e.what());
    } catch (const InputError& e) {
        throw DataError(e.what());
    }
}

json scene_to_json(const Scene& s) {
    json j;
    j["schema"] = kSceneSchema;
    j["id"] = s.id;
    j["objects"] = std::vector<std::size_t>(s.objects.begin(), s.objects.end());
    j["slots"] = s.slots;
    json rows = json::array();
    for (std::size_t r = 0; r < s.patches.rows(); ++r) {
        auto row = s.patches.row(r);
        rows.push_back(std::vector<float>(row.begin(), row.end()));
    }
    j["patches"] = std::move(rows);
    return j;
}

Scene scene_from_json(const json& j, std::size_t image_tokens, std::size_t patch_dim) {
    require_schema(j, kSceneSchema);
    try {
        Scene s;
        s.id = j.at("id").get<std::string>();
        for (auto o : j.at("objects").get<std::vector<std::size_t>>()) s.objects.insert(o);
        s.slots = j.at("slots").get<std::vector<int>>();
        const auto& rows = j.at("patches");
        if (rows.size() != image_tokens || s.slots.size() != image_tokens)
            throw DataError("scene '" + s.id + "' has the wrong number of patches");
        s.patches = Matrix(image_tokens, patch_dim);
        for (std::size_t r = 0; r < image_tokens; ++r) {
            auto row = rows[r].get<std::vector<float>>();
            if (row.size() != patch_dim) throw DataError("scene '" + s.id + "' patch width mismatch");
            std::copy(row.begin(), row.end(), s.patches.row(r).begin());
        }
        return s;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed scene record: ") + e.what());
    }
}

json world_header_json(const World& w) {
    const auto& s = w.spec;
    json j;
    j["schema"] = kWorldHeaderSchema;
    j["seed"] = s.seed;
    j["n_scenes"] = s.n_scenes;
    j["image_tokens"] = s.image_tokens;
    j["patch_dim"] = s.patch_dim;
    j["patches_per_object"] = s.patches_per_object;
    j["patch_noise"] = s.patch_noise;
    j["objects"] = s.objects;
    j["base_rate"] = s.base_rate;
    json corr = json::array();
    for (const auto& c : s.correlations)
        corr.push_back({{"anchor", c.anchor}, {"dependent", c.dependent}, {"given_anchor", c.given_anchor}});
    j["correlations"] = std::move(corr);
    return j;
}

json cooc_to_json(const CoocStats& c) {
    json j;
    j["schema"] = "imccd.cooc.v1";
    j["objects"] = c.objects;
    j["support"] = c.support;
    json rate = json::array();
    for (std::size_t r = 0; r < c.rate.rows(); ++r) {
        auto row = c.rate.row(r);
        rate.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["rate"] = std::move(rate);
    std::vector<std::string> partners;
    for (std::size_t p : c.partner) partners.push_back(c.objects[p]);
    j["partner"] = partners;
    return j;
}

CoocStats cooc_from_json(const json& j) {
    require_schema(j, "imccd.cooc.v1");
    try {
        CoocStats c;
        c.objects = j.at("objects").get<std::vector<std::string>>();
        c.support = j.at("support").get<std::vector<std::uint64_t>>();
        const std::size_t k = c.objects.size();
        const auto& rate = j.at("rate");
        if (rate.size() != k || c.support.size() != k) throw DataError("co-occurrence table shape mismatch");
        c.rate = MatrixD(k, k);
        for (std::size_t r = 0; r < k; ++r) {
            auto row = rate[r].get<std::vector<double>>();
            if (row.size() != k) throw DataError("co-occurrence table shape mismatch");
            for (std::size_t col = 0; col < k; ++col) {
                if (!(row[col] >= 0.0 && row[col] <= 1.0)) throw DataError("co-occurrence rate outside [0, 1]");
                c.rate(r, col) = row[col];
            }
        }
        for (const auto& name : j.at("partner").get<std::vector<std::string>>()) c.partner.push_back(c.index_of(name));
        if (c.partner.size() != k) throw DataError("co-occurrence partner list length mismatch");
        return c;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed co-occurrence file: ") + e.what());
    } catch (const InputError& e) {
        throw DataError(e.what());
    }
}

std::string world_to_jsonl(const World& w) {
    std::string out = world_header_json(w).dump() + "\n";
    for (const auto& s : w.scenes) out += scene_to_json(s).dump() + "\n";
    return out;
}

World world_from_jsonl(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    World w;
    bool header = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("world line " + std::to_string(lineno) + ": " + e.what());
        }
        if (!header) {
            require_schema(j, kWorldHeaderSchema);
            try {
                auto& s = w.spec;
                s.seed = j.at("seed").get<std::uint64_t>();
                s.n_scenes = j.at("n_scenes").get<std::size_t>();
                s.image_tokens = j.at("image_tokens").get<std::size_t>();
                s.patch_dim = j.at("patch_dim").get<std::size_t>();
                s.patches_per_object = j.at("patches_per_object").get<std::size_t>();
                s.patch_noise = j.at("patch_noise").get<double>();
                s.objects = j.at("objects").get<std::vector<std::string>>();
                s.base_rate = j.at("base_rate").get<std::vector<double>>();
                for (const auto& c : j.at("correlations"))
                    s.correlations.push_back({c.at("anchor").get<std::size_t>(), c.at("dependent").get<std::size_t>(),
                                              c.at("given_anchor").get<double>()});
            } catch (const json::exception& e) {
                throw DataError(std::string("malformed world header: ") + e.what());
            }
            w.spec.validate();
            w.vocab.objects = w.spec.objects;
            header = true;
            continue;
        }
        Scene s = scene_from_json(j, w.spec.image_tokens, w.spec.patch_dim);
        for (std::size_t o : s.objects)
            if (o >= w.spec.objects.size()) throw DataError("scene '" + s.id + "' references an unknown object");
        w.scenes.push_back(std::move(s));
    }
    if (!header) throw DataError("world file is empty");
    if (w.scenes.size() != w.spec.n_scenes) throw DataError("world file scene count disagrees with its header");
    std::vector<std::set<std::size_t>> present;
    for (const auto& s : w.scenes) present.push_back(s.objects);
    w.cooc = CoocStats::from_scenes(w.spec.objects, present);
    return w;
}

// ---- biased model ----

namespace {

// Residual stream layout of the constructed model.
constexpr std::size_t kWordFeat = 0;     // object-word identity, 12 dims
constexpr std::size_t kWordFlag = 12;
constexpr std::size_t kBosFlag = 13;
constexpr std::size_t kPatchFeat = 16;   // patch object identity, 12 dims
constexpr std::size_t kImageFlag = 28;
constexpr std::size_t kBackground = 29;
constexpr std::size_t kObjectPatch = 30;
constexpr std::size_t kAsked = 32;       // copied identity of the asked object, 12 dims
constexpr std::size_t kEvidence = 50;    // yes/no evidence read by the head
constexpr std::size_t kConst = 63;

constexpr double kConstScale = 4.0;

// Attention layout: layer 0 head 0 copies the asked object; heads 1-3 are
// position-only heads. Layer 1 heads 0-2 match the asked object against patch
// content (four objects each); head 3 carries the spurious channel.
constexpr std::size_t kSpuriousLayer = 1;
constexpr std::size_t kSpuriousHead = 3;

struct Scales {
    double copy_query = 1.0, copy_key = 2.5, copy_out = 0.53;
    double recency = 1.0;
    double match = 9.0, match_sink = 2.5, match_out = 0.55;
    double spurious_sink = 2.5, spurious_value = 0.27, spurious_sink_value = 0.52;
    double evidence_bias = 0.6;
    double readout = 5.0;
    double other_token_bias = -20.0;
};

}  // namespace

ModelConfig biased_model_config() { return ModelConfig{}; }

ModelWeights build_biased_weights(const World& world, double bias_scale, double noise_scale, std::uint64_t seed) {
    const ModelConfig cfg = biased_model_config();
    const auto& spec = world.spec;
    if (spec.objects.size() > kMaxObjects) throw ConfigError("too many objects for the constructed model");
    if (spec.correlations.size() > 4) throw ConfigError("the spurious head holds at most four anchor pairs");
    if (spec.patch_dim != cfg.patch_dim) throw ConfigError("world patch_dim differs from the model patch_dim");
    if (kObjectBase + spec.objects.size() > cfg.vocab_size) throw ConfigError("vocabulary does not fit the model");
    const Scales sc;
    const std::size_t hd = cfg.head_dim;

    ModelWeights w = random_weights(cfg, seed, noise_scale);
    Rng rng(derive_seed(seed, 0x5eed));
    // Embedding noise only on the spare dims; noise on a structural channel
    // shifts the yes/no balance by a seed-dependent offset.
    w.token_embedding = Matrix(cfg.vocab_size, cfg.d_model);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t)
        for (std::size_t d = kEvidence + 1; d < kConst; ++d) w.token_embedding(t, d) = float(noise_scale * rng.normal());
    for (std::size_t t = 0; t < cfg.vocab_size; ++t) w.token_embedding(t, kConst) = float(kConstScale);
    for (std::size_t o = 0; o < spec.objects.size(); ++o) {
        const TokenId t = world.vocab.object_token(o);
        w.token_embedding(t, kWordFeat + o) = 1.0f;
        w.token_embedding(t, kWordFlag) = 1.0f;
    }
    w.token_embedding(kBos, kBosFlag) = 1.0f;

    w.patch_projector = Matrix(cfg.patch_dim, cfg.d_model);
    for (std::size_t i = 0; i < kMaxObjects; ++i) w.patch_projector(i, kPatchFeat + i) = 1.0f;
    w.patch_projector(12, kObjectPatch) = 1.0f;
    w.patch_projector(12, kImageFlag) = 1.0f;
    w.patch_projector(13, kBackground) = 1.0f;
    w.patch_projector(13, kImageFlag) = 1.0f;
    w.patch_projector(15, kConst) = float(kConstScale);

    const ModelWeights zero = zero_weights(cfg);
    for (std::size_t l = 0; l < 2; ++l) w.layers[l] = zero.layers[l];

    auto& l0 = w.layers[0];
    l0.wq(kConst, 14) = float(sc.copy_query);
    l0.wk(kWordFlag, 14) = float(sc.copy_key);
    for (std::size_t i = 0; i < kMaxObjects; ++i) {
        l0.wv(kWordFeat + i, i) = 1.0f;
        l0.wo(i, kAsked + i) = float(sc.copy_out);
    }
    const double recency_weights[3] = {1.0, 0.75, 0.5};
    for (std::size_t h = 1; h < 4; ++h) {
        l0.wq(kConst, h * hd + 4) = float(sc.recency * recency_weights[h - 1]);
        l0.wk(kImageFlag, h * hd + 4) = 1.0f;
    }

    auto& l1 = w.layers[1];
    for (std::size_t g = 0; g < 3; ++g) {
        const std::size_t off = g * hd;
        for (std::size_t j = 0; j < 4; ++j) {
            const std::size_t o = 4 * g + j;
            l1.wq(kAsked + o, off + 8 + 2 * j) = float(sc.match);
            l1.wk(kPatchFeat + o, off + 8 + 2 * j) = 1.0f;
        }
        l1.wq(kConst, off + 6) = float(sc.match_sink);
        l1.wk(kBosFlag, off + 6) = 1.0f;
        l1.wv(kObjectPatch, off) = 1.0f;
        l1.wo(off, kEvidence) = float(sc.match_out);
    }
    const std::size_t soff = kSpuriousHead * hd;
    for (std::size_t j = 0; j < spec.correlations.size(); ++j) {
        const auto& c = spec.correlations[j];
        l1.wq(kAsked + c.dependent, soff + 8 + 2 * j) = float(bias_scale);
        l1.wk(kPatchFeat + c.anchor, soff + 8 + 2 * j) = 1.0f;
    }
    l1.wq(kConst, soff + 6) = float(sc.spurious_sink);
    l1.wk(kBosFlag, soff + 6) = 1.0f;
    l1.wv(kObjectPatch, soff) = float(-sc.spurious_value);
    l1.wv(kBosFlag, soff) = float(-sc.spurious_sink_value);
    l1.wo(soff, kEvidence) = 1.0f;
    l1.b2[kEvidence] = float(sc.evidence_bias);
    // Noise layers must not write the evidence channel either.
    for (std::size_t l = 2; l < cfg.n_layers; ++l) {
        auto& lw = w.layers[l];
        for (std::size_t r = 0; r < cfg.d_model; ++r) lw.wo(r, kEvidence) = 0.0f;
        for (std::size_t r = 0; r < cfg.ffn_dim; ++r) lw.w2(r, kEvidence) = 0.0f;
        lw.b2[kEvidence] = 0.0f;
    }

    w.final_norm.assign(cfg.d_model, 1.0f);
    w.head = Matrix(cfg.d_model, cfg.vocab_size);
    w.head(kEvidence, kYes) = float(sc.readout);
    w.head(kEvidence, kNo) = float(-sc.readout);
    w.head_bias.assign(cfg.vocab_size, float(sc.other_token_bias));
    w.head_bias[kYes] = 0.0f;
    w.head_bias[kNo] = 0.0f;
    check_weights(w);
    return w;
}

Answer answer_probe(const ModelWeights& weights, const World& world, const Probe& probe, const DecodeConfig& config,
                    GenerationResult* result) {
    DecodeConfig c = config;
    c.max_new_tokens = 1;
    GenerationResult r = generate(weights, probe_prompt(world, probe), c);
    const TokenId t = r.tokens.at(0);
    if (result) *result = std::move(r);
    if (t == kYes) return Answer::yes;
    if (t == kNo) return Answer::no;
    return Answer::invalid;
}

namespace {

Probe planted_probe(const World& world, const Scene& scene, std::size_t object) {
    Probe p;
    p.probe_id = scene.id + "-cal";
    p.image_id = scene.id;
    p.object = world.spec.objects[object];
    p.text_tokens = pope_question(world.vocab, object, true);
    p.layout = prompt_layout(world.spec.image_tokens, p.text_tokens.size());
    return p;
}

}  // namespace

BiasCheck measure_bias(const ModelWeights& weights, const World& world, std::size_t max_probes) {
    BiasCheck check;
    DecodeConfig base;
    base.method = Method::baseline;
    std::size_t failures = 0, neither_no = 0;
    double margin_sum = 0.0;
    std::size_t margin_count = 0;
    for (const auto& scene : world.scenes) {
        for (const auto& c : world.spec.correlations) {
            const bool a = scene.objects.count(c.anchor) != 0;
            const bool b = scene.objects.count(c.dependent) != 0;
            if (b) continue;
            const Probe p = planted_probe(world, scene, c.dependent);
            if (a && check.planted_probes < max_probes) {
                ++check.planted_probes;
                if (answer_probe(weights, world, p, base) == Answer::yes) ++failures;
                if (margin_count < 32) {
                    DecoderSession s(weights, p.layout);
                    AttentionTrace trace;
                    s.prefill(p.text_tokens, scene.patches, &trace);
                    const auto& logits = trace.layers[kSpuriousLayer].heads[kSpuriousHead].logits;
                    const std::size_t last = logits.rows() - 1;
                    double on = 0.0, off = 0.0;
                    std::size_t n_on = 0, n_off = 0;
                    for (std::size_t k = 0; k < p.layout.image_len; ++k) {
                        const double v = logits(last, p.layout.image_begin() + k);
                        if (scene.slots[k] == int(c.anchor)) on += v, ++n_on;
                        else off += v, ++n_off;
                    }
                    if (n_on && n_off) {
                        margin_sum += on / double(n_on) - off / double(n_off);
                        ++margin_count;
                    }
                }
            } else if (!a && check.neither_probes < max_probes) {
                ++check.neither_probes;
                if (answer_probe(weights, world, p, base) == Answer::no) ++neither_no;
            }
        }
    }
    if (check.planted_probes == 0 || check.neither_probes == 0)
        throw DataError("world has no planted or no neither-present scenes to calibrate against");
    check.failure_rate = double(failures) / double(check.planted_probes);
    check.neither_no_rate = double(neither_no) / double(check.neither_probes);
    check.probe_margin = margin_count ? margin_sum / double(margin_count) : 0.0;
    return check;
}

BiasedModel build_biased_model(const World& world, const BiasConfig& config) {
    if (!(config.bias_scale >= 0.0) || !(config.growth > 1.0)) throw ConfigError("invalid bias calibration settings");
    BiasedModel m;
    m.bias_scale = config.bias_scale;
    for (std::size_t it = 0;; ++it) {
        m.weights = build_biased_weights(world, m.bias_scale, config.noise_scale, config.seed);
        m.check = measure_bias(m.weights, world, config.calibration_probes);
        m.iterations = it + 1;
        if (!config.calibrate) return m;
        if (m.check.neither_no_rate < config.target_neither_no_rate)
            throw DataError("constructed model answers 'no' on only " + std::to_string(m.check.neither_no_rate) +
                            " of neither-present probes at bias scale " + std::to_string(m.bias_scale));
        if (m.check.failure_rate >= config.target_failure_rate && m.check.probe_margin >= config.probe_margin) return m;
        if (it + 1 >= config.max_iterations)
            throw DataError("bias calibration stopped at scale " + std::to_string(m.bias_scale) + ": failure rate " +
                            std::to_string(m.check.failure_rate) + ", probe margin " +
                            std::to_string(m.check.probe_margin));
        m.bias_scale *= config.growth;
    }
}

Prompt identical_content_prompt(const Vocabulary& vocab, std::size_t image_tokens, std::size_t patch_dim,
                                std::size_t asked_object) {
    Prompt p;
    p.text_tokens = pope_question(vocab, asked_object, true);
    p.layout = prompt_layout(image_tokens, p.text_tokens.size());
    p.image_patches = Matrix(image_tokens, patch_dim);
    const auto patch = clean_patch(-1, patch_dim);
    for (std::size_t r = 0; r < image_tokens; ++r) std::copy(patch.begin(), patch.end(), p.image_patches.row(r).begin());
    return p;
}

}  // namespace imccd::synth
