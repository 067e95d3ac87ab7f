#include "nrf/metrics.hpp"
#include "nrf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>

namespace nrf {

ConfusionMatrix::ConfusionMatrix(int num_classes) : c_(num_classes) {
  if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: num_classes must be >= 1");
  counts_.assign(static_cast<std::size_t>(c_) * static_cast<std::size_t>(c_), 0);
}

ConfusionMatrix ConfusionMatrix::from(std::span<const int> labels, std::span<const int> predictions, int num_classes) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("ConfusionMatrix: label/prediction length mismatch");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], predictions[i]);
  return cm;
}

void ConfusionMatrix::add(int label, int prediction, std::int64_t count) {
  if (label < 0 || label >= c_ || prediction < 0 || prediction >= c_) {
    throw std::out_of_range("ConfusionMatrix: class index out of range");
  }
  if (count < 0) throw std::invalid_argument("ConfusionMatrix: negative count");
  counts_[static_cast<std::size_t>(label * c_ + prediction)] += count;
}

std::int64_t ConfusionMatrix::at(int label, int prediction) const {
  return counts_.at(static_cast<std::size_t>(label * c_ + prediction));
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

std::int64_t ConfusionMatrix::row_total(int label) const {
  std::int64_t s = 0;
  for (int j = 0; j < c_; ++j) s += at(label, j);
  return s;
}

BalancedAccuracy balanced_accuracy_detail(const ConfusionMatrix& cm) {
  BalancedAccuracy out;
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const auto n = cm.row_total(c);
    if (n == 0) {
      out.excluded_classes.push_back(c);
      continue;
    }
    sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(n);
    ++present;
  }
  out.value = present == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / present;
  return out;
}

double balanced_accuracy(const ConfusionMatrix& cm) { return balanced_accuracy_detail(cm).value; }

double balanced_accuracy(std::span<const int> labels, std::span<const int> predictions, int num_classes) {
  return balanced_accuracy(ConfusionMatrix::from(labels, predictions, num_classes));
}

std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> rank(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

double binary_auc(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw std::invalid_argument("binary_auc: length mismatch");
  const auto rank = midranks(scores);
  double pos_rank_sum = 0.0;
  std::int64_t npos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i]) {
      pos_rank_sum += rank[i];
      ++npos;
    }
  }
  const auto nneg = static_cast<std::int64_t>(scores.size()) - npos;
  if (npos == 0 || nneg == 0) return std::numeric_limits<double>::quiet_NaN();
  const double u = pos_rank_sum - static_cast<double>(npos) * static_cast<double>(npos + 1) / 2.0;
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

double macro_ovr_auc(const Tensor& scores, std::span<const int> labels) {
  if (scores.dim() != 2 || scores.size(0) != static_cast<std::int64_t>(labels.size())) {
    throw std::invalid_argument("macro_ovr_auc: scores must be [N,C] with N == labels.size()");
  }
  const auto n = scores.size(0);
  const auto c = scores.size(1);
  std::vector<double> col(static_cast<std::size_t>(n));
  std::unique_ptr<bool[]> pos(new bool[static_cast<std::size_t>(n)]);
  double sum = 0.0;
  int used = 0;
  for (std::int64_t k = 0; k < c; ++k) {
    for (std::int64_t i = 0; i < n; ++i) {
      col[static_cast<std::size_t>(i)] = scores[i * c + k];
      pos[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(i)] == k;
    }
    const double a = binary_auc(col, std::span<const bool>(pos.get(), static_cast<std::size_t>(n)));
    if (std::isnan(a)) continue;
    sum += a;
    ++used;
  }
  return used == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / used;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  const auto ra = midranks(a), rb = midranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    cov += (ra[i] - mean) * (rb[i] - mean);
    va += (ra[i] - mean) * (ra[i] - mean);
    vb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (va == 0.0 || vb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return cov / std::sqrt(va * vb);
}

}  // namespace nrf

namespace nrf {

ClassMetrics score_logits(const Tensor& logits, std::span<const int> labels, int num_classes) {
  ClassMetrics m;
  const auto preds = argmax_rows(logits);
  m.balanced_accuracy = balanced_accuracy(labels, preds, num_classes);
  m.auc = macro_ovr_auc(ops::softmax(logits), labels);
  return m;
}

}  // namespace nrf
