#pragma once

// Labeled examples and evaluation metrics.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gspen/errors.hpp"

namespace gspen {

struct Example {
  std::vector<double> x;
  std::vector<int> y;
  std::optional<std::string> id;
  bool operator==(const Example&) const = default;
};

enum class MetricKind { hamming_accuracy, sequence_accuracy, macro_f1 };

inline std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::hamming_accuracy: return "hamming_accuracy";
    case MetricKind::sequence_accuracy: return "sequence_accuracy";
    case MetricKind::macro_f1: return "macro_f1";
  }
  return "?";
}

inline MetricKind parse_metric(const std::string& s) {
  for (auto k : {MetricKind::hamming_accuracy, MetricKind::sequence_accuracy, MetricKind::macro_f1})
    if (to_string(k) == s) return k;
  throw InvalidArgument("unknown metric '" + s + "'");
}

using Labelings = std::vector<std::vector<int>>;

namespace detail {
inline void check_aligned(const Labelings& pred, const Labelings& truth) {
  if (pred.size() != truth.size()) throw InvalidArgument("metrics: prediction and ground-truth counts differ");
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i].size() != truth[i].size())
      throw InvalidArgument("metrics: labeling " + std::to_string(i) + " has mismatched length");
}
}  // namespace detail

/// Fraction of variables predicted correctly.
inline double hamming_accuracy(const Labelings& pred, const Labelings& truth) {
  detail::check_aligned(pred, truth);
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t k = 0; k < pred[i].size(); ++k, ++total) hit += pred[i][k] == truth[i][k];
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

/// Fraction of labelings predicted exactly.
inline double sequence_accuracy(const Labelings& pred, const Labelings& truth) {
  detail::check_aligned(pred, truth);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == truth[i];
  return pred.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Unweighted mean over variables of the F1 of label 1 (binary variables);
/// a variable with no predicted and no true positives scores 0.
inline double macro_f1(const Labelings& pred, const Labelings& truth) {
  detail::check_aligned(pred, truth);
  if (pred.empty()) return 0.0;
  const std::size_t K = truth.front().size();
  double sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i][k] == 1, t = truth[i][k] == 1;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    sum += denom ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom) : 0.0;
  }
  return K ? sum / static_cast<double>(K) : 0.0;
}

inline double compute_metric(MetricKind kind, const Labelings& pred, const Labelings& truth) {
  switch (kind) {
    case MetricKind::hamming_accuracy: return hamming_accuracy(pred, truth);
    case MetricKind::sequence_accuracy: return sequence_accuracy(pred, truth);
    case MetricKind::macro_f1: return macro_f1(pred, truth);
  }
  return 0.0;
}

/// Binary predictions from per-variable probabilities of label 1: y_k = [q_k ≥ threshold].
inline Labelings threshold_labelings(const std::vector<std::vector<double>>& positive_prob, double threshold) {
  Labelings out;
  out.reserve(positive_prob.size());
  for (const auto& q : positive_prob) {
    std::vector<int> y(q.size());
    for (std::size_t k = 0; k < q.size(); ++k) y[k] = q[k] >= threshold ? 1 : 0;
    out.push_back(std::move(y));
  }
  return out;
}

struct ThresholdChoice {
  double threshold = 0.5;
  double macro_f1 = 0.0;
};

/// Best threshold in {0.01, ..., 0.99} for macro-F1; 0.5 wins ties so tuning
/// never scores below the untuned rule.
inline ThresholdChoice tune_threshold(const std::vector<std::vector<double>>& positive_prob, const Labelings& truth) {
  ThresholdChoice best{0.5, macro_f1(threshold_labelings(positive_prob, 0.5), truth)};
  for (int i = 1; i <= 99; ++i) {
    const double t = i / 100.0;
    const double f = macro_f1(threshold_labelings(positive_prob, t), truth);
    if (f > best.macro_f1) best = {t, f};
  }
  return best;
}

}  // namespace gspen
