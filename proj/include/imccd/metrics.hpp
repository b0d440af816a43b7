#pragma once

// Hallucination metrics over integer counts. Every rate is kept as an exact
// fraction so golden tests can compare without tolerance.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "imccd/numeric.hpp"

namespace imccd {

struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 1;

    double value() const { return double(num) / double(den); }
    // Cross-multiplied comparison, so 1/2 == 2/4.
    friend bool operator==(const Ratio& a, const Ratio& b) {
        return (unsigned __int128)a.num * b.den == (unsigned __int128)b.num * a.den;
    }
};

// Returns nullopt when the denominator is zero.
std::optional<Ratio> make_ratio(std::uint64_t num, std::uint64_t den);

enum class Answer { yes, no, invalid };
std::string_view to_string(Answer a);
Answer parse_answer(std::string_view text);  // anything but yes/no is invalid

struct PopeItem {
    std::string image_id;
    std::string object;
    bool label_yes = false;
    Answer answer = Answer::invalid;
};

struct PopeCounts {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::uint64_t invalid_on_yes = 0;  // scored as misses
    std::uint64_t invalid_on_no = 0;   // scored as wrong, but not as a false "yes"
    std::uint64_t total() const { return tp + fp + tn + fn + invalid_on_yes + invalid_on_no; }
};

struct PopeReport {
    PopeCounts counts;
    Ratio accuracy;
    std::optional<Ratio> precision;  // null when nothing was answered "yes"
    Ratio recall;                    // null-free: requires >= 1 positive label
    std::optional<Ratio> f1;
    Ratio invalid_rate;
    std::optional<Ratio> yes_ratio;
};

// Throws UsageError on empty input. Recall and f1 count invalid answers on
// positive items as misses.
PopeReport pope_metrics(const std::vector<PopeItem>& items);

struct ChairItem {
    std::string image_id;
    std::vector<std::vector<std::string>> sentences;  // object mentions per sentence, in order
    std::set<std::string> ground_truth;
};

struct ChairReport {
    std::uint64_t mentions = 0;       // deduplicated per item
    std::uint64_t hallucinated = 0;
    std::uint64_t sentences = 0;
    std::uint64_t hallucinated_sentences = 0;
    std::uint64_t gt_objects = 0;
    std::uint64_t gt_mentioned = 0;
    std::optional<Ratio> chair_i;
    std::optional<Ratio> chair_s;
    std::optional<Ratio> recall;
    std::optional<Ratio> f1;  // harmonic mean of (1 - chair_i) and recall
};

ChairReport chair_metrics(const std::vector<ChairItem>& items);

struct MmeItem {
    std::string image_id;
    std::string question_id;
    bool correct = false;
};

struct MmeReport {
    std::uint64_t questions = 0;
    std::uint64_t correct = 0;
    std::uint64_t images = 0;
    std::uint64_t images_both_correct = 0;
    Ratio acc;       // x100
    Ratio acc_plus;  // x100
    Ratio score;     // acc + acc_plus, in [0, 200]
};

// Throws InputError when an image does not have exactly two questions.
MmeReport mme_score(const std::vector<MmeItem>& items);

// Co-existence table over an object vocabulary: rate(x, y) = P(y present | x present).
struct CoocStats {
    std::vector<std::string> objects;
    MatrixD rate;
    std::vector<std::uint64_t> support;  // scenes containing each object
    std::vector<std::size_t> partner;    // argmax_y rate(x, y), y != x, lowest index on ties

    std::size_t index_of(std::string_view name) const;  // throws InputError
    static CoocStats from_scenes(const std::vector<std::string>& objects,
                                 const std::vector<std::set<std::size_t>>& present);
};

struct RateGroup {
    std::uint64_t absent = 0;
    std::uint64_t yes_on_absent = 0;  // any answer other than "no"
    std::uint64_t present = 0;
    std::uint64_t no_on_present = 0;  // any answer other than "yes"
    std::optional<Ratio> fpr_on_absent;
    std::optional<Ratio> fnr_on_present;
};

struct CoocReport {
    double threshold = 0.7;
    RateGroup qualifying;  // object co-exists with its top partner >= threshold and partner present
    RateGroup complement;
};

// image_objects maps image id to the set of present object names.
CoocReport cooc_hallucination_rates(const std::vector<PopeItem>& items, const CoocStats& cooc,
                                    const std::map<std::string, std::set<std::string>>& image_objects,
                                    double threshold = 0.70);

struct PairRate {
    std::string object;
    std::string partner;
    double co_existence = 0.0;
    RateGroup group;  // probes of `object` with `partner` present
};

struct TopPairsReport {
    std::vector<PairRate> pairs;
    std::optional<double> mean_fpr_on_absent;  // mean over pairs with defined rates
    std::optional<double> mean_fnr_on_present;
};

// The k (object, top partner) pairs with the highest co-existence.
TopPairsReport top_pair_rates(const std::vector<PopeItem>& items, const CoocStats& cooc,
                              const std::map<std::string, std::set<std::string>>& image_objects, std::size_t k);

}  // namespace imccd
