#include "changeminds/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

namespace changeminds::metrics {

ConfusionAccumulator::ConfusionAccumulator(int num_classes)
    : tp_(num_classes, 0), fp_(num_classes, 0), fn_(num_classes, 0) {
    if (num_classes < 1) {
        throw std::invalid_argument("ConfusionAccumulator needs at least one class");
    }
}

void ConfusionAccumulator::update(std::span<const std::int64_t> prediction,
                                  std::span<const std::int64_t> truth) {
    if (prediction.size() != truth.size()) {
        throw std::invalid_argument(fmt::format("prediction has {} pixels, truth has {}",
                                                prediction.size(), truth.size()));
    }
    const auto n = static_cast<std::int64_t>(tp_.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const auto p = prediction[i];
        const auto t = truth[i];
        if (p < 0 || p >= n || t < 0 || t >= n) {
            throw std::invalid_argument(
                fmt::format("label out of range at pixel {}: pred={} truth={} classes={}", i, p, t, n));
        }
        if (p == t) {
            ++tp_[t];
        } else {
            ++fp_[p];
            ++fn_[t];
        }
    }
    pixels_ += truth.size();
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
    if (other.num_classes() != num_classes()) {
        throw std::invalid_argument("cannot merge accumulators with different class counts");
    }
    for (std::size_t c = 0; c < tp_.size(); ++c) {
        tp_[c] += other.tp_[c];
        fp_[c] += other.fp_[c];
        fn_[c] += other.fn_[c];
    }
    pixels_ += other.pixels_;
}

double class_iou(const ConfusionAccumulator& acc, int cls) {
    const auto denom = acc.tp(cls) + acc.fp(cls) + acc.fn(cls);
    if (denom == 0) {
        return 1.0;
    }
    return static_cast<double>(acc.tp(cls)) / static_cast<double>(denom);
}

double miou(const ConfusionAccumulator& acc) {
    if (acc.pixels() == 0) {
        throw std::logic_error("mIoU of an empty accumulator");
    }
    double sum = 0.0;
    for (int c = 0; c < acc.num_classes(); ++c) {
        sum += class_iou(acc, c);
    }
    return sum / acc.num_classes();
}

F1Ciou f1_ciou(const ConfusionAccumulator& acc, int change_class) {
    const double tp = static_cast<double>(acc.tp(change_class));
    const double fp = static_cast<double>(acc.fp(change_class));
    const double fn = static_cast<double>(acc.fn(change_class));
    F1Ciou out;
    if (tp + fp + fn == 0.0) {
        out.empty = true;
        return out;
    }
    out.f1 = 2.0 * tp / (2.0 * tp + fp + fn);
    out.ciou = tp / (tp + fp + fn);
    return out;
}

namespace {

constexpr char kSep = '\x1f';

using NgramCounts = std::unordered_map<std::string, int>;

// Counts of all n-grams of exactly order n, keyed by the joined tokens.
NgramCounts count_ngrams(const Tokens& tokens, int n) {
    NgramCounts counts;
    if (static_cast<int>(tokens.size()) < n) {
        return counts;
    }
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string key = tokens[i];
        for (int k = 1; k < n; ++k) {
            key += kSep;
            key += tokens[i + k];
        }
        ++counts[key];
    }
    return counts;
}

void check_corpus(const std::vector<Tokens>& candidates,
                  const std::vector<std::vector<Tokens>>& references) {
    if (candidates.size() != references.size()) {
        throw std::invalid_argument(fmt::format("{} candidates but {} reference lists",
                                                candidates.size(), references.size()));
    }
}

struct BleuStats {
    std::array<double, 4> matched{};
    std::array<double, 4> total{};
    double cand_len = 0.0;
    double ref_len = 0.0;
};

BleuStats bleu_stats(const std::vector<Tokens>& candidates,
                     const std::vector<std::vector<Tokens>>& references, int max_n) {
    check_corpus(candidates, references);
    BleuStats stats;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const auto& cand = candidates[s];
        const auto& refs = references[s];
        const auto c = static_cast<long>(cand.size());
        stats.cand_len += static_cast<double>(c);

        // Closest reference length; ties go to the shorter one.
        long best = -1;
        for (const auto& r : refs) {
            const auto len = static_cast<long>(r.size());
            if (best < 0 || std::labs(len - c) < std::labs(best - c) ||
                (std::labs(len - c) == std::labs(best - c) && len < best)) {
                best = len;
            }
        }
        stats.ref_len += static_cast<double>(std::max(best, 0L));

        for (int n = 1; n <= max_n; ++n) {
            const auto cand_counts = count_ngrams(cand, n);
            std::unordered_map<std::string, int> max_ref;
            for (const auto& r : refs) {
                for (const auto& [gram, cnt] : count_ngrams(r, n)) {
                    auto& slot = max_ref[gram];
                    slot = std::max(slot, cnt);
                }
            }
            for (const auto& [gram, cnt] : cand_counts) {
                auto it = max_ref.find(gram);
                if (it != max_ref.end()) {
                    stats.matched[n - 1] += std::min(cnt, it->second);
                }
            }
            stats.total[n - 1] += static_cast<double>(std::max(0L, c - n + 1));
        }
    }
    return stats;
}

double bleu_from_stats(const BleuStats& stats, int n) {
    double log_sum = 0.0;
    for (int k = 0; k < n; ++k) {
        if (stats.total[k] == 0.0 || stats.matched[k] == 0.0) {
            return 0.0;
        }
        log_sum += std::log(stats.matched[k] / stats.total[k]);
    }
    const double bp = stats.cand_len < stats.ref_len ? std::exp(1.0 - stats.ref_len / stats.cand_len) : 1.0;
    return bp * std::exp(log_sum / n);
}

} // namespace

double bleu(const std::vector<Tokens>& candidates,
            const std::vector<std::vector<Tokens>>& references, int n) {
    if (n < 1 || n > 4) {
        throw std::invalid_argument(fmt::format("BLEU order must be in 1..4, got {}", n));
    }
    if (candidates.empty()) {
        throw std::invalid_argument("BLEU of an empty candidate set");
    }
    return bleu_from_stats(bleu_stats(candidates, references, n), n);
}

std::array<double, 4> bleu_1_to_4(const std::vector<Tokens>& candidates,
                                  const std::vector<std::vector<Tokens>>& references) {
    if (candidates.empty()) {
        throw std::invalid_argument("BLEU of an empty candidate set");
    }
    const auto stats = bleu_stats(candidates, references, 4);
    return {bleu_from_stats(stats, 1), bleu_from_stats(stats, 2), bleu_from_stats(stats, 3),
            bleu_from_stats(stats, 4)};
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0);
    std::vector<std::size_t> cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_l_sentence(const Tokens& candidate, const Tokens& reference) {
    constexpr double kBeta = 1.2;
    if (candidate.empty() || reference.empty()) {
        return 0.0;
    }
    const auto lcs = static_cast<double>(lcs_length(candidate, reference));
    if (lcs == 0.0) {
        return 0.0;
    }
    const double precision = lcs / static_cast<double>(candidate.size());
    const double recall = lcs / static_cast<double>(reference.size());
    const double b2 = kBeta * kBeta;
    return (1.0 + b2) * precision * recall / (recall + b2 * precision);
}

double rouge_l(const std::vector<Tokens>& candidates,
               const std::vector<std::vector<Tokens>>& references) {
    check_corpus(candidates, references);
    if (candidates.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        double best = 0.0;
        for (const auto& ref : references[s]) {
            best = std::max(best, rouge_l_sentence(candidates[s], ref));
        }
        total += best;
    }
    return total / static_cast<double>(candidates.size());
}

namespace {

constexpr int kCiderOrders = 4;
constexpr double kCiderSigma = 6.0;

struct TfIdfVector {
    std::array<std::unordered_map<std::string, double>, kCiderOrders> weights;
    std::array<double, kCiderOrders> norm{};
    double length = 0.0;
};

TfIdfVector tfidf(const Tokens& sentence,
                  const std::unordered_map<std::string, double>& doc_freq,
                  double log_corpus_size) {
    TfIdfVector vec;
    for (int n = 1; n <= kCiderOrders; ++n) {
        for (const auto& [gram, tf] : count_ngrams(sentence, n)) {
            auto it = doc_freq.find(gram);
            const double df = it == doc_freq.end() ? 1.0 : std::max(1.0, it->second);
            const double w = tf * (log_corpus_size - std::log(df));
            vec.weights[n - 1][gram] = w;
            vec.norm[n - 1] += w * w;
        }
        vec.norm[n - 1] = std::sqrt(vec.norm[n - 1]);
    }
    vec.length = static_cast<double>(sentence.size());
    return vec;
}

std::array<double, kCiderOrders> cider_similarity(const TfIdfVector& hyp, const TfIdfVector& ref) {
    const double delta = hyp.length - ref.length;
    const double penalty = std::exp(-(delta * delta) / (2.0 * kCiderSigma * kCiderSigma));
    std::array<double, kCiderOrders> sim{};
    for (int n = 0; n < kCiderOrders; ++n) {
        for (const auto& [gram, w] : hyp.weights[n]) {
            auto it = ref.weights[n].find(gram);
            if (it != ref.weights[n].end()) {
                sim[n] += std::min(w, it->second) * it->second;
            }
        }
        if (hyp.norm[n] != 0.0 && ref.norm[n] != 0.0) {
            sim[n] /= hyp.norm[n] * ref.norm[n];
        }
        sim[n] *= penalty;
    }
    return sim;
}

} // namespace

double cider_d(const std::vector<Tokens>& candidates,
               const std::vector<std::vector<Tokens>>& references) {
    check_corpus(candidates, references);
    if (candidates.empty()) {
        return 0.0;
    }

    // Document frequency: number of images whose references contain the n-gram.
    std::unordered_map<std::string, double> doc_freq;
    for (const auto& refs : references) {
        std::unordered_set<std::string> seen;
        for (const auto& r : refs) {
            for (int n = 1; n <= kCiderOrders; ++n) {
                for (const auto& entry : count_ngrams(r, n)) {
                    seen.insert(entry.first);
                }
            }
        }
        for (const auto& gram : seen) {
            doc_freq[gram] += 1.0;
        }
    }
    const double log_corpus_size = std::log(static_cast<double>(references.size()));

    double total = 0.0;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
        const auto& refs = references[s];
        if (refs.empty()) {
            continue;
        }
        const auto hyp = tfidf(candidates[s], doc_freq, log_corpus_size);
        std::array<double, kCiderOrders> acc{};
        for (const auto& r : refs) {
            const auto sim = cider_similarity(hyp, tfidf(r, doc_freq, log_corpus_size));
            for (int n = 0; n < kCiderOrders; ++n) {
                acc[n] += sim[n];
            }
        }
        double mean = 0.0;
        for (double v : acc) {
            mean += v;
        }
        mean /= kCiderOrders;
        total += mean / static_cast<double>(refs.size()) * 10.0;
    }
    return total / static_cast<double>(candidates.size());
}

CaptionEvalReport evaluate_captions(const std::vector<Tokens>& candidates,
                                    const std::vector<std::vector<Tokens>>& references) {
    CaptionEvalReport report;
    report.bleu = bleu_1_to_4(candidates, references);
    report.rouge_l = rouge_l(candidates, references);
    report.cider_d = cider_d(candidates, references);
    for (const auto& c : candidates) {
        report.candidate_tokens += c.size();
    }
    for (const auto& refs : references) {
        for (const auto& r : refs) {
            report.reference_tokens += r.size();
        }
    }
    return report;
}

std::string to_csv(const MetricRows& rows) {
    std::string out = "metric,value\n";
    for (const auto& [name, value] : rows) {
        out += fmt::format("{},{:.10g}\n", name, value);
    }
    return out;
}

std::string to_table(const MetricRows& rows) {
    std::size_t width = 6;
    for (const auto& row : rows) {
        width = std::max(width, row.first.size());
    }
    std::string out = fmt::format("{:<{}}  {:>10}\n", "metric", width, "value");
    out += std::string(width + 12, '-') + "\n";
    for (const auto& [name, value] : rows) {
        out += fmt::format("{:<{}}  {:>10.4f}\n", name, width, value);
    }
    return out;
}

} // namespace changeminds::metrics
