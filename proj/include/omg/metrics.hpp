#pragma once

// Sentiment metrics over continuous scores in [-3, 3]. ACC7 bins by
// round-then-clamp; ACC2/F1 default to positive (>0) vs negative with
// zero-score samples excluded, switchable to non-negative vs negative.

#include <vector>

#include "omg/config.hpp"
#include "omg/error.hpp"
#include "omg/plan.hpp"

namespace omg {

namespace detail {
inline void check_metric_input(const std::vector<double>& preds,
                               const std::vector<double>& truths) {
  if (preds.empty() || truths.empty()) throw EmptyInput("metric over empty arrays");
  if (preds.size() != truths.size()) throw ShapeMismatch("metric arrays misaligned");
}
}  // namespace detail

struct BinaryCounts {
  long tp = 0, fp = 0, tn = 0, fn = 0;
  long total() const { return tp + fp + tn + fn; }
};

inline BinaryCounts binary_counts(const std::vector<double>& preds,
                                  const std::vector<double>& truths, Acc2Mode mode) {
  detail::check_metric_input(preds, truths);
  BinaryCounts c;
  for (size_t i = 0; i < preds.size(); ++i) {
    bool truth_pos;
    if (mode == Acc2Mode::pos_vs_neg_excl_zero) {
      if (truths[i] == 0.0) continue;  // excluded
      truth_pos = truths[i] > 0.0;
    } else {
      truth_pos = truths[i] >= 0.0;
    }
    bool pred_pos = mode == Acc2Mode::pos_vs_neg_excl_zero ? preds[i] > 0.0
                                                           : preds[i] >= 0.0;
    if (truth_pos && pred_pos) ++c.tp;
    else if (!truth_pos && pred_pos) ++c.fp;
    else if (!truth_pos && !pred_pos) ++c.tn;
    else ++c.fn;
  }
  if (c.total() == 0) throw AllExcluded("every sample has a zero score");
  return c;
}

inline double acc2(const std::vector<double>& preds, const std::vector<double>& truths,
                   Acc2Mode mode = Acc2Mode::pos_vs_neg_excl_zero) {
  BinaryCounts c = binary_counts(preds, truths, mode);
  return double(c.tp + c.tn) / double(c.total());
}

// binary F1 of the positive class: 2TP / (2TP + FP + FN)
inline double f1(const std::vector<double>& preds, const std::vector<double>& truths,
                 Acc2Mode mode = Acc2Mode::pos_vs_neg_excl_zero) {
  BinaryCounts c = binary_counts(preds, truths, mode);
  long denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 0.0 : 2.0 * double(c.tp) / double(denom);
}

inline double acc7(const std::vector<double>& preds, const std::vector<double>& truths) {
  detail::check_metric_input(preds, truths);
  long hits = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (score_to_class7(preds[i]) == score_to_class7(truths[i])) ++hits;
  return double(hits) / double(preds.size());
}

}  // namespace omg
