#pragma once

#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "hma/error.hpp"
#include "hma/tensor.hpp"

namespace hma {

/// K x K pixel counts; entry (i, j) counts pixels of true class i predicted as j.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
        if (classes == 0) throw UsageError("confusion matrix needs at least one class");
    }

    std::size_t classes() const { return k_; }
    std::uint64_t operator()(std::size_t truth, std::size_t pred) const { return counts_[truth * k_ + pred]; }
    std::uint64_t& operator()(std::size_t truth, std::size_t pred) { return counts_[truth * k_ + pred]; }

    void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
        if (pred.size() != truth.size())
            throw ShapeError("accumulate: " + std::to_string(pred.size()) + " predictions vs " +
                             std::to_string(truth.size()) + " labels");
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] >= k_ || truth[i] >= k_)
                throw LabelError("label out of range for " + std::to_string(k_) + " classes at pixel " +
                                 std::to_string(i));
        for (std::size_t i = 0; i < pred.size(); ++i) ++counts_[truth[i] * k_ + pred[i]];
    }

    void accumulate(const LabelMap& pred, const LabelMap& truth) {
        if (pred.dims() != truth.dims())
            throw ShapeError("accumulate: dims " + shape_str(pred.dims()) + " vs " + shape_str(truth.dims()));
        accumulate(pred.data(), truth.data());
    }

    void merge(const ConfusionMatrix& other) {
        if (other.k_ != k_) throw ShapeError("merge: class counts differ");
        for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    }

    std::uint64_t total() const {
        std::uint64_t s = 0;
        for (auto c : counts_) s += c;
        return s;
    }
    std::uint64_t trace() const {
        std::uint64_t s = 0;
        for (std::size_t i = 0; i < k_; ++i) s += counts_[i * k_ + i];
        return s;
    }
    std::uint64_t true_positives(std::size_t k) const { return (*this)(k, k); }
    std::uint64_t false_positives(std::size_t k) const {
        std::uint64_t s = 0;
        for (std::size_t i = 0; i < k_; ++i)
            if (i != k) s += (*this)(i, k);
        return s;
    }
    std::uint64_t false_negatives(std::size_t k) const {
        std::uint64_t s = 0;
        for (std::size_t j = 0; j < k_; ++j)
            if (j != k) s += (*this)(k, j);
        return s;
    }

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    std::size_t k_;
    std::vector<std::uint64_t> counts_;
};

/// A per-class score; `defined` is false when its denominator was zero and
/// the value was set to 0 by convention.
struct ClassScore {
    double value = 0.0;
    bool defined = true;
};

inline void check_class(const ConfusionMatrix& cm, std::size_t k) {
    if (k >= cm.classes()) throw LabelError("class " + std::to_string(k) + " out of range");
}

/// F-measure with beta = 1: 2 P R / (P + R).
inline ClassScore f1_score(const ConfusionMatrix& cm, std::size_t k) {
    check_class(cm, k);
    const double tp = static_cast<double>(cm.true_positives(k));
    const double fp = static_cast<double>(cm.false_positives(k));
    const double fn = static_cast<double>(cm.false_negatives(k));
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    if (precision + recall == 0.0) return {0.0, false};
    return {2.0 * precision * recall / (precision + recall), true};
}

inline ClassScore iou(const ConfusionMatrix& cm, std::size_t k) {
    check_class(cm, k);
    const auto denom = cm.true_positives(k) + cm.false_positives(k) + cm.false_negatives(k);
    if (denom == 0) return {0.0, false};
    return {static_cast<double>(cm.true_positives(k)) / static_cast<double>(denom), true};
}

inline double overall_accuracy(const ConfusionMatrix& cm) {
    const auto total = cm.total();
    if (total == 0) throw UsageError("overall accuracy of an empty confusion matrix");
    return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

struct MetricSummary {
    std::vector<ClassScore> f1, iou;
    double mean_f1 = 0.0;  // foreground classes only (class 0 is background)
    double miou = 0.0;     // all classes
    double oa = 0.0;
};

inline MetricSummary summarize(const ConfusionMatrix& cm, std::size_t background = 0) {
    MetricSummary s;
    std::size_t fg = 0;
    for (std::size_t k = 0; k < cm.classes(); ++k) {
        s.f1.push_back(f1_score(cm, k));
        s.iou.push_back(iou(cm, k));
        s.miou += s.iou.back().value;
        if (k != background) {
            s.mean_f1 += s.f1.back().value;
            ++fg;
        }
    }
    s.miou /= static_cast<double>(cm.classes());
    s.mean_f1 = fg ? s.mean_f1 / static_cast<double>(fg) : 0.0;
    s.oa = overall_accuracy(cm);
    return s;
}

/// class,F1,IoU rows followed by meanF1, mIoU and OA footer rows.
inline std::string summary_csv(const MetricSummary& s, const std::vector<std::string>& names = {}) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6);
    os << "class,F1,IoU\n";
    for (std::size_t k = 0; k < s.f1.size(); ++k)
        os << (k < names.size() ? names[k] : std::to_string(k)) << ',' << s.f1[k].value << ',' << s.iou[k].value
           << '\n';
    os << "meanF1," << s.mean_f1 << ",\n";
    os << "mIoU," << s.miou << ",\n";
    os << "OA," << s.oa << ",\n";
    return os.str();
}

}  // namespace hma
