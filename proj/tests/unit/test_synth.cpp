#include "doctest.h"

#include "imccd/errors.hpp"
#include "imccd/synth.hpp"

#include <algorithm>
#include <cmath>

using namespace imccd;
using namespace imccd::synth;

namespace {

Probe make_probe(const World& w, const Scene& s, std::size_t object, bool label) {
    Probe p;
    p.probe_id = s.id + "-x";
    p.image_id = s.id;
    p.object = w.spec.objects[object];
    p.label_yes = label;
    p.text_tokens = pope_question(w.vocab, object, true);
    p.layout = prompt_layout(w.spec.image_tokens, p.text_tokens.size());
    return p;
}

DecodeConfig greedy_baseline() {
    DecodeConfig c;
    c.method = Method::baseline;
    c.max_new_tokens = 1;
    return c;
}

}  // namespace

TEST_SUITE("synth") {

TEST_CASE("token table") {
    CHECK(function_words().size() == kObjectBase);
    CHECK(function_word_id("yes") == kYes);
    CHECK(function_word_id("no") == kNo);
    CHECK(function_word_id(".") == kPeriod);
    CHECK_FALSE(function_word_id("table").has_value());
    Vocabulary v{{"table", "food"}};
    CHECK(v.object_token(1) == 33);
    CHECK(v.object_of(33) == 1u);
    CHECK_FALSE(v.object_of(34).has_value());
    CHECK(v.detokenize(std::vector<TokenId>{kYes, 32, kPeriod}) == "yes table .");
}

TEST_CASE("pope question template") {
    const Vocabulary v{{"car"}};
    const auto q = pope_question(v, 0, true);
    CHECK(v.detokenize(q) == "<bos> user : is there a car in the image ? please answer in one word .");
    CHECK(pope_question(v, 0, false).size() == q.size() - 6);
    const TokenLayout l = prompt_layout(16, q.size());
    CHECK(l.system_len == kSystemLen);
    CHECK(l.text_len == 17);
}

TEST_CASE("planted conditional rate is realized") {
    WorldSpec s = default_world_spec(3, 1000);
    s.correlations = {{0, 1, 0.9}};
    s.base_rate[3] = s.base_rate[5] = s.base_rate[7] = 0.3;
    const World w = gen_world(s);
    const double rate = w.cooc.rate(0, 1);
    CHECK(rate >= 0.85);
    CHECK(rate <= 0.95);
}

TEST_CASE("zero conditional targets never co-occur") {
    WorldSpec s = default_world_spec(4, 600);
    for (auto& c : s.correlations) c.given_anchor = 0.0;
    const World w = gen_world(s);
    for (const auto& scene : w.scenes)
        for (const auto& c : s.correlations) CHECK_FALSE((scene.objects.count(c.anchor) && scene.objects.count(c.dependent)));
}

TEST_CASE("world generation is deterministic and round-trips") {
    const World a = gen_world(default_world_spec(7, 50));
    const World b = gen_world(default_world_spec(7, 50));
    const std::string text = world_to_jsonl(a);
    CHECK(text == world_to_jsonl(b));
    CHECK(text != world_to_jsonl(gen_world(default_world_spec(8, 50))));
    const World back = world_from_jsonl(text);
    CHECK(world_to_jsonl(back) == text);
    CHECK(back.scenes[3].patches == a.scenes[3].patches);
    CHECK(cooc_to_json(back.cooc) == cooc_to_json(a.cooc));
}

TEST_CASE("malformed world input is a data error") {
    CHECK_THROWS_AS(world_from_jsonl("{\"schema\":\"nope\"}\n"), DataError);
    CHECK_THROWS_AS(world_from_jsonl("not json\n"), DataError);
    CHECK_THROWS_AS(world_from_jsonl(""), DataError);
}

TEST_CASE("world spec validation") {
    WorldSpec s = default_world_spec(0);
    s.objects.push_back("x");
    s.base_rate.push_back(0.1);
    CHECK_THROWS_AS(s.validate(), DataError);  // 13 objects

    s = default_world_spec(0);
    s.objects[1] = "table";
    CHECK_THROWS_AS(s.validate(), DataError);

    s = default_world_spec(0);
    s.objects[1] = "yes";
    CHECK_THROWS_AS(s.validate(), DataError);

    s = default_world_spec(0);
    s.correlations.push_back({2, 1, 0.5});
    CHECK_THROWS_AS(s.validate(), DataError);  // two anchors for one dependent

    s = default_world_spec(0);
    s.correlations.push_back({1, 8, 0.5});
    CHECK_THROWS_AS(s.validate(), DataError);  // chain

    s = default_world_spec(0);
    s.base_rate[0] = 1.5;
    CHECK_THROWS_AS(s.validate(), DataError);
}

TEST_CASE("random strategy is balanced") {
    const World w = gen_world(default_world_spec(11, 80));
    auto probes = emit_probes(w, ProbeStrategy::random, {}, 1);
    REQUIRE(probes.size() >= 100);
    probes.resize(100);
    CHECK(std::count_if(probes.begin(), probes.end(), [](const Probe& p) { return p.label_yes; }) == 50);
}

TEST_CASE("adversarial negatives are top partners of present objects") {
    const World w = gen_world(default_world_spec(12, 200));
    const auto probes = emit_probes(w, ProbeStrategy::adversarial, {}, 2);
    std::size_t negatives = 0;
    for (const auto& p : probes) {
        const Scene& s = w.scene(p.image_id);
        const std::size_t o = w.cooc.index_of(p.object);
        CHECK(s.objects.count(o) == (p.label_yes ? 1u : 0u));
        if (p.label_yes) continue;
        ++negatives;
        bool partner = false;
        for (std::size_t x : s.objects) partner |= w.cooc.partner[x] == o;
        CHECK(partner);
    }
    CHECK(negatives > 0);
}

TEST_CASE("popular negatives are the most frequent absent objects") {
    const World w = gen_world(default_world_spec(13, 60));
    for (const auto& p : emit_probes(w, ProbeStrategy::popular, {}, 3)) {
        if (p.label_yes) continue;
        const Scene& s = w.scene(p.image_id);
        const auto support = w.cooc.support[w.cooc.index_of(p.object)];
        for (std::size_t o = 0; o < w.spec.objects.size(); ++o)
            if (!s.objects.count(o)) CHECK(w.cooc.support[o] <= support);
    }
}

TEST_CASE("probe records round-trip") {
    const World w = gen_world(default_world_spec(14, 20));
    ProbeTemplate t;
    t.include_captions = true;
    t.include_mme = true;
    const auto probes = emit_probes(w, ProbeStrategy::random, t, 4);
    bool saw_caption = false, saw_mme = false;
    for (const auto& p : probes) {
        const Probe q = probe_from_json(probe_to_json(p));
        CHECK(q.probe_id == p.probe_id);
        CHECK(q.image_id == p.image_id);
        CHECK(q.object == p.object);
        CHECK(q.label_yes == p.label_yes);
        CHECK(q.kind == p.kind);
        CHECK(q.text_tokens == p.text_tokens);
        CHECK(q.layout == p.layout);
        CHECK(q.question_id == p.question_id);
        saw_caption |= p.kind == ProbeKind::caption;
        saw_mme |= p.kind == ProbeKind::mme;
    }
    CHECK(saw_caption);
    CHECK(saw_mme);
    CHECK_THROWS_AS(probe_from_json(nlohmann::json{{"schema", kProbeSchema}}), DataError);
}

TEST_CASE("probe emission is deterministic") {
    const World w = gen_world(default_world_spec(15, 40));
    const auto a = emit_probes(w, ProbeStrategy::adversarial, {}, 9);
    const auto b = emit_probes(w, ProbeStrategy::adversarial, {}, 9);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(probe_to_json(a[i]) == probe_to_json(b[i]));
}

TEST_CASE("biased model meets its construction targets") {
    const World w = gen_world(default_world_spec(21, 400));
    BiasConfig cfg;
    cfg.seed = 5;
    const BiasedModel m = build_biased_model(w, cfg);
    CHECK(m.check.failure_rate >= 0.5);
    CHECK(m.check.neither_no_rate >= 0.9);
    CHECK(m.check.probe_margin >= cfg.probe_margin);
    CHECK(m.check.planted_probes > 0);
    CHECK_NOTHROW(check_weights(m.weights));
    CHECK(m.weights.config == biased_model_config());
}

TEST_CASE("unbiased construction answers independently of the anchor") {
    const World w = gen_world(default_world_spec(22, 2000));
    const ModelWeights weights = build_biased_weights(w, 0.0, 0.02, 6);
    std::size_t with_n = 0, with_yes = 0, without_n = 0, without_yes = 0;
    for (const auto& scene : w.scenes) {
        for (const auto& c : w.spec.correlations) {
            if (scene.objects.count(c.dependent)) continue;
            const bool anchor = scene.objects.count(c.anchor) != 0;
            if ((anchor ? with_n : without_n) >= 250) continue;
            const Answer a = answer_probe(weights, w, make_probe(w, scene, c.dependent, false), greedy_baseline());
            (anchor ? with_n : without_n)++;
            if (a != Answer::no) (anchor ? with_yes : without_yes)++;
        }
        if (with_n >= 250 && without_n >= 250) break;
    }
    REQUIRE(with_n == 250);
    REQUIRE(without_n == 250);
    CHECK(std::abs(double(with_yes) / 250.0 - double(without_yes) / 250.0) < 0.1);
}

TEST_CASE("identical content prompt repeats one background patch") {
    const Vocabulary v{default_world_spec(0).objects};
    const Prompt p = identical_content_prompt(v, 16, 16, 3);
    CHECK(p.layout.image_len == 16);
    for (std::size_t r = 1; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) CHECK(p.image_patches(r, c) == p.image_patches(0, c));
}

}  // TEST_SUITE
