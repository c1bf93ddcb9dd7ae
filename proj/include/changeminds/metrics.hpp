#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace changeminds::metrics {

using Tokens = std::vector<std::string>;

/// Per-class TP/FP/FN counters for dense label maps.
///
/// Counters only grow; `merge` adds another accumulator's counts so that
/// evaluation shards can be combined at the end.
class ConfusionAccumulator {
public:
    explicit ConfusionAccumulator(int num_classes);

    /// Accumulates one prediction/ground-truth pair of equal length.
    /// Throws std::invalid_argument on length mismatch or out-of-range labels.
    void update(std::span<const std::int64_t> prediction, std::span<const std::int64_t> truth);
    void merge(const ConfusionAccumulator& other);

    int num_classes() const { return static_cast<int>(tp_.size()); }
    std::uint64_t tp(int cls) const { return tp_.at(cls); }
    std::uint64_t fp(int cls) const { return fp_.at(cls); }
    std::uint64_t fn(int cls) const { return fn_.at(cls); }
    std::uint64_t pixels() const { return pixels_; }

    bool operator==(const ConfusionAccumulator&) const = default;

private:
    std::vector<std::uint64_t> tp_;
    std::vector<std::uint64_t> fp_;
    std::vector<std::uint64_t> fn_;
    std::uint64_t pixels_ = 0;
};

/// Mean IoU over all classes. A class absent from both prediction and truth
/// scores IoU = 1. Throws std::logic_error if nothing was accumulated.
double miou(const ConfusionAccumulator& acc);

/// IoU of a single class, with the same empty-class convention as `miou`.
double class_iou(const ConfusionAccumulator& acc, int cls);

struct F1Ciou {
    double f1 = 0.0;
    double ciou = 0.0;
    bool empty = false; // no predicted and no true pixels of the change class
};

F1Ciou f1_ciou(const ConfusionAccumulator& acc, int change_class);

/// Corpus-level BLEU-n with clipped n-gram precision, uniform weights over
/// orders 1..n, closest-reference brevity penalty and no smoothing.
double bleu(const std::vector<Tokens>& candidates,
            const std::vector<std::vector<Tokens>>& references, int n);

/// BLEU-1..4 in one pass over the corpus.
std::array<double, 4> bleu_1_to_4(const std::vector<Tokens>& candidates,
                                  const std::vector<std::vector<Tokens>>& references);

/// LCS-based F-measure (beta = 1.2) maximized over each sample's references,
/// averaged over the corpus.
double rouge_l(const std::vector<Tokens>& candidates,
               const std::vector<std::vector<Tokens>>& references);

/// ROUGE-L F-measure of one candidate against one reference.
double rouge_l_sentence(const Tokens& candidate, const Tokens& reference);

/// CIDEr-D: tf-idf weighted n-gram cosine (n = 1..4) with clipping and a
/// Gaussian length penalty (sigma = 6), scaled by 10. Document frequencies
/// come from the references of the evaluated corpus.
double cider_d(const std::vector<Tokens>& candidates,
               const std::vector<std::vector<Tokens>>& references);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

struct CaptionEvalReport {
    std::array<double, 4> bleu{};
    double rouge_l = 0.0;
    double cider_d = 0.0;
    std::size_t candidate_tokens = 0;
    std::size_t reference_tokens = 0;
};

CaptionEvalReport evaluate_captions(const std::vector<Tokens>& candidates,
                                    const std::vector<std::vector<Tokens>>& references);

/// Ordered (name, value) rows; rendered as `metric,value` CSV or a text table.
using MetricRows = std::vector<std::pair<std::string, double>>;

std::string to_csv(const MetricRows& rows);
std::string to_table(const MetricRows& rows);

} // namespace changeminds::metrics
