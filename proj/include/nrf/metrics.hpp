#pragma once
// Classification metrics over prediction streams.

#include <cstdint>
#include <span>
#include <vector>

#include "nrf/tensor.hpp"

namespace nrf {

// C x C counts, rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);
  static ConfusionMatrix from(std::span<const int> labels, std::span<const int> predictions, int num_classes);

  void add(int label, int prediction, std::int64_t count = 1);
  std::int64_t at(int label, int prediction) const;
  int num_classes() const noexcept { return c_; }
  std::int64_t total() const;
  std::int64_t row_total(int label) const;

 private:
  int c_;
  std::vector<std::int64_t> counts_;
};

struct BalancedAccuracy {
  double value = 0.0;
  std::vector<int> excluded_classes;  // no true samples
};

// Mean of per-class recall over classes with at least one true sample.
BalancedAccuracy balanced_accuracy_detail(const ConfusionMatrix& cm);
double balanced_accuracy(const ConfusionMatrix& cm);
double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions, int num_classes);

// Rank AUC of `scores` for positives vs negatives, ties at mid-rank.
// Returns NaN when either group is empty.
double binary_auc(std::span<const double> scores, std::span<const bool> positive);

// Per-class one-vs-rest AUC over scores[:, c], averaged over classes present in
// labels (and having at least one negative).
double macro_ovr_auc(const Tensor& scores, std::span<const int> labels);

// Spearman rank correlation with mid-ranks. NaN if either input is constant.
double spearman(std::span<const double> a, std::span<const double> b);

// 1-based mid-ranks.
std::vector<double> midranks(std::span<const double> v);

}  // namespace nrf

namespace nrf {

struct ClassMetrics {
  double balanced_accuracy = 0.0;
  double auc = 0.0;  // macro one-vs-rest over softmax scores
};
ClassMetrics score_logits(const Tensor& logits, std::span<const int> labels, int num_classes);

}  // namespace nrf
