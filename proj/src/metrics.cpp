#include "imccd/metrics.hpp"

#include "imccd/errors.hpp"

#include <algorithm>
#include <numeric>

namespace imccd {

std::optional<Ratio> make_ratio(std::uint64_t num, std::uint64_t den) {
    if (den == 0) return std::nullopt;
    return Ratio{num, den};
}

std::string_view to_string(Answer a) {
    switch (a) {
        case Answer::yes: return "yes";
        case Answer::no: return "no";
        case Answer::invalid: return "invalid";
    }
    return "invalid";
}

Answer parse_answer(std::string_view text) {
    if (text == "yes") return Answer::yes;
    if (text == "no") return Answer::no;
    return Answer::invalid;
}

PopeReport pope_metrics(const std::vector<PopeItem>& items) {
    if (items.empty()) throw UsageError("pope_metrics needs at least one item");
    PopeReport r;
    auto& c = r.counts;
    for (const auto& it : items) {
        switch (it.answer) {
            case Answer::yes: (it.label_yes ? c.tp : c.fp)++; break;
            case Answer::no: (it.label_yes ? c.fn : c.tn)++; break;
            case Answer::invalid: (it.label_yes ? c.invalid_on_yes : c.invalid_on_no)++; break;
        }
    }
    const std::uint64_t n = c.total();
    const std::uint64_t missed = c.fn + c.invalid_on_yes;
    r.accuracy = Ratio{c.tp + c.tn, n};
    r.precision = make_ratio(c.tp, c.tp + c.fp);
    r.recall = make_ratio(c.tp, c.tp + missed).value_or(Ratio{0, 1});
    r.f1 = make_ratio(2 * c.tp, 2 * c.tp + c.fp + missed);
    r.invalid_rate = Ratio{c.invalid_on_yes + c.invalid_on_no, n};
    r.yes_ratio = make_ratio(c.tp + c.fp, n);
    return r;
}

ChairReport chair_metrics(const std::vector<ChairItem>& items) {
    ChairReport r;
    for (const auto& it : items) {
        std::set<std::string> mentioned;
        for (const auto& sentence : it.sentences) {
            bool bad = false;
            for (const auto& obj : sentence) {
                mentioned.insert(obj);
                if (!it.ground_truth.count(obj)) bad = true;
            }
            ++r.sentences;
            if (bad) ++r.hallucinated_sentences;
        }
        r.mentions += mentioned.size();
        for (const auto& obj : mentioned)
            if (!it.ground_truth.count(obj)) ++r.hallucinated;
        r.gt_objects += it.ground_truth.size();
        for (const auto& obj : it.ground_truth)
            if (mentioned.count(obj)) ++r.gt_mentioned;
    }
    r.chair_i = make_ratio(r.hallucinated, r.mentions);
    r.chair_s = make_ratio(r.hallucinated_sentences, r.sentences);
    r.recall = make_ratio(r.gt_mentioned, r.gt_objects);
    // precision = c/a, recall = c/b  =>  f1 = 2c / (a + b)
    const std::uint64_t correct = r.mentions - r.hallucinated;
    if (r.mentions && r.gt_objects) r.f1 = Ratio{2 * correct, r.mentions + r.gt_objects};
    return r;
}

MmeReport mme_score(const std::vector<MmeItem>& items) {
    std::map<std::string, std::vector<bool>> by_image;
    for (const auto& it : items) by_image[it.image_id].push_back(it.correct);
    MmeReport r;
    for (const auto& [image, answers] : by_image) {
        if (answers.size() != 2)
            throw InputError("image '" + image + "' has " + std::to_string(answers.size()) +
                             " questions, expected 2");
        r.correct += std::count(answers.begin(), answers.end(), true);
        if (answers[0] && answers[1]) ++r.images_both_correct;
    }
    r.questions = items.size();
    r.images = by_image.size();
    if (r.images == 0) throw InputError("mme_score needs at least one image");
    r.acc = Ratio{100 * r.correct, r.questions};
    r.acc_plus = Ratio{100 * r.images_both_correct, r.images};
    // a/q + b/i over the common denominator q*i
    r.score = Ratio{100 * (r.correct * r.images + r.images_both_correct * r.questions), r.questions * r.images};
    return r;
}

std::size_t CoocStats::index_of(std::string_view name) const {
    auto it = std::find(objects.begin(), objects.end(), name);
    if (it == objects.end()) throw InputError("object '" + std::string(name) + "' not in the co-occurrence table");
    return std::size_t(it - objects.begin());
}

CoocStats CoocStats::from_scenes(const std::vector<std::string>& objects,
                                 const std::vector<std::set<std::size_t>>& present) {
    const std::size_t k = objects.size();
    CoocStats s;
    s.objects = objects;
    s.rate = MatrixD(k, k, 0.0);
    s.support.assign(k, 0);
    std::vector<std::uint64_t> joint(k * k, 0);
    for (const auto& scene : present)
        for (std::size_t x : scene) {
            if (x >= k) throw InputError("scene references object index " + std::to_string(x));
            ++s.support[x];
            for (std::size_t y : scene) ++joint[x * k + y];
        }
    for (std::size_t x = 0; x < k; ++x)
        for (std::size_t y = 0; y < k; ++y)
            s.rate(x, y) = s.support[x] ? double(joint[x * k + y]) / double(s.support[x]) : 0.0;
    s.partner.assign(k, 0);
    for (std::size_t x = 0; x < k; ++x) {
        std::size_t best = x == 0 ? 1 : 0;
        for (std::size_t y = 0; y < k; ++y)
            if (y != x && s.rate(x, y) > s.rate(x, best)) best = y;
        s.partner[x] = k > 1 ? best : x;
    }
    return s;
}

namespace {

void tally(RateGroup& g, const PopeItem& it) {
    if (it.label_yes) {
        ++g.present;
        if (it.answer != Answer::yes) ++g.no_on_present;
    } else {
        ++g.absent;
        if (it.answer != Answer::no) ++g.yes_on_absent;
    }
}

void finish(RateGroup& g) {
    g.fpr_on_absent = make_ratio(g.yes_on_absent, g.absent);
    g.fnr_on_present = make_ratio(g.no_on_present, g.present);
}

bool partner_present(const PopeItem& it, const std::string& partner,
                     const std::map<std::string, std::set<std::string>>& image_objects) {
    auto img = image_objects.find(it.image_id);
    if (img == image_objects.end()) throw InputError("no object annotation for image '" + it.image_id + "'");
    return img->second.count(partner) != 0;
}

}  // namespace

CoocReport cooc_hallucination_rates(const std::vector<PopeItem>& items, const CoocStats& cooc,
                                    const std::map<std::string, std::set<std::string>>& image_objects,
                                    double threshold) {
    CoocReport r;
    r.threshold = threshold;
    for (const auto& it : items) {
        const std::size_t x = cooc.index_of(it.object);
        const std::size_t p = cooc.partner[x];
        const bool qualifies =
            p != x && cooc.rate(x, p) >= threshold && partner_present(it, cooc.objects[p], image_objects);
        tally(qualifies ? r.qualifying : r.complement, it);
    }
    finish(r.qualifying);
    finish(r.complement);
    return r;
}

TopPairsReport top_pair_rates(const std::vector<PopeItem>& items, const CoocStats& cooc,
                              const std::map<std::string, std::set<std::string>>& image_objects, std::size_t k) {
    std::vector<std::size_t> order(cooc.objects.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return cooc.rate(a, cooc.partner[a]) > cooc.rate(b, cooc.partner[b]);
    });
    order.resize(std::min(k, order.size()));

    TopPairsReport r;
    for (std::size_t x : order) {
        PairRate pr;
        pr.object = cooc.objects[x];
        pr.partner = cooc.objects[cooc.partner[x]];
        pr.co_existence = cooc.rate(x, cooc.partner[x]);
        for (const auto& it : items)
            if (it.object == pr.object && partner_present(it, pr.partner, image_objects)) tally(pr.group, it);
        finish(pr.group);
        r.pairs.push_back(std::move(pr));
    }
    double fpr = 0.0, fnr = 0.0;
    std::size_t n_fpr = 0, n_fnr = 0;
    for (const auto& p : r.pairs) {
        if (p.group.fpr_on_absent) fpr += p.group.fpr_on_absent->value(), ++n_fpr;
        if (p.group.fnr_on_present) fnr += p.group.fnr_on_present->value(), ++n_fnr;
    }
    if (n_fpr) r.mean_fpr_on_absent = fpr / double(n_fpr);
    if (n_fnr) r.mean_fnr_on_present = fnr / double(n_fnr);
    return r;
}

}  // namespace imccd
