#include <cmath>
#include <random>

#include "doctest.h"
#include "nrf/metrics.hpp"

using namespace nrf;

namespace {

// P(score_pos > score_neg) + 0.5 P(tie) by enumerating every pair.
double pair_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
  double wins = 0.0;
  std::int64_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!pos[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (pos[j]) continue;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      ++pairs;
    }
  }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("balanced accuracy examples") {
  ConfusionMatrix d(3);
  for (int c = 0; c < 3; ++c) d.add(c, c, 5 + c);
  CHECK(balanced_accuracy(d) == 1.0);

  for (int pos : {3, 50, 97}) {
    ConfusionMatrix cm(2);
    cm.add(1, 1, pos);
    cm.add(0, 1, 100 - pos);
    CHECK(balanced_accuracy(cm) == 0.5);
  }
  ConfusionMatrix cm(2);
  cm.add(0, 0, 8);
  cm.add(0, 1, 2);
  cm.add(1, 0, 3);
  cm.add(1, 1, 7);
  CHECK(balanced_accuracy(cm) == doctest::Approx(0.75).epsilon(1e-15));

  ConfusionMatrix missing(3);
  missing.add(0, 0, 4);
  missing.add(2, 0, 4);
  const auto detail = balanced_accuracy_detail(missing);
  CHECK(detail.value == 0.5);
  CHECK(detail.excluded_classes == std::vector<int>{1});
}

TEST_CASE("balanced accuracy matches hand-computed recalls on random matrices") {
  std::mt19937 rng(1);
  for (int t = 0; t < 100; ++t) {
    const int c = 2 + static_cast<int>(rng() % 9);
    ConfusionMatrix cm(c);
    std::vector<std::vector<std::int64_t>> m(static_cast<std::size_t>(c), std::vector<std::int64_t>(static_cast<std::size_t>(c)));
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) {
        m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = static_cast<std::int64_t>(rng() % 50);
        cm.add(i, j, m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
      }
    m[0][0] += 1;
    cm.add(0, 0);
    double sum = 0.0;
    int present = 0;
    for (int i = 0; i < c; ++i) {
      std::int64_t row = 0;
      for (auto v : m[static_cast<std::size_t>(i)]) row += v;
      if (row == 0) continue;
      sum += static_cast<double>(m[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)]) / static_cast<double>(row);
      ++present;
    }
    CHECK(std::fabs(balanced_accuracy(cm) - sum / present) <= 1e-12);
  }
}

TEST_CASE("balanced accuracy equals accuracy on balanced data") {
  std::mt19937 rng(2);
  std::vector<int> y, p;
  for (int c = 0; c < 4; ++c)
    for (int k = 0; k < 25; ++k) {
      y.push_back(c);
      p.push_back(static_cast<int>(rng() % 4));
    }
  int correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) correct += y[i] == p[i];
  CHECK(std::fabs(balanced_accuracy(y, p, 4) - correct / 100.0) <= 1e-12);
}

TEST_CASE("AUC examples and pair-counting oracle") {
  const std::vector<double> sep = {0.1, 0.2, 0.8, 0.9};
  const bool pos_sep[] = {false, false, true, true};
  CHECK(binary_auc(sep, pos_sep) == 1.0);
  const std::vector<double> flat = {0.3, 0.3, 0.3, 0.3};
  CHECK(binary_auc(flat, pos_sep) == 0.5);

  Tensor const_scores({6, 3}, 0.2f);
  CHECK(macro_ovr_auc(const_scores, std::vector<int>{0, 1, 2, 0, 1, 2}) == 0.5);

  std::mt19937 rng(3);
  for (int t = 0; t < 200; ++t) {
    const int n = 2 + static_cast<int>(rng() % 49);
    const int c = 2 + static_cast<int>(rng() % 4);
    Tensor scores({n, c});
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : scores.data()) v = static_cast<float>(rng() % 7) / 7.0f;  // many ties
    for (auto& v : y) v = static_cast<int>(rng() % static_cast<unsigned>(c));
    double sum = 0.0;
    int used = 0;
    for (int k = 0; k < c; ++k) {
      std::vector<double> s(static_cast<std::size_t>(n));
      std::vector<bool> pos(static_cast<std::size_t>(n));
      int np = 0;
      for (int i = 0; i < n; ++i) {
        s[static_cast<std::size_t>(i)] = scores[i * c + k];
        pos[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] == k;
        np += y[static_cast<std::size_t>(i)] == k;
      }
      if (np == 0 || np == n) continue;
      sum += pair_auc(s, pos);
      ++used;
    }
    const double got = macro_ovr_auc(scores, y);
    if (used == 0) {
      CHECK(std::isnan(got));
    } else {
      CHECK(std::fabs(got - sum / used) <= 1e-12);
    }
  }
}

TEST_CASE("AUC invariance to monotone transforms and permutation concentration") {
  std::mt19937 rng(4);
  std::normal_distribution<float> d;
  Tensor s({200, 3});
  std::vector<int> y(200);
  for (auto& v : s.data()) v = d(rng);
  for (auto& v : y) v = static_cast<int>(rng() % 3);
  Tensor t = s;
  for (auto& v : t.data()) v = std::exp(2.0f * v) + 1.0f;
  CHECK(macro_ovr_auc(s, y) == macro_ovr_auc(t, y));

  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937 r2(static_cast<unsigned>(seed));
    std::vector<int> perm = y;
    std::shuffle(perm.begin(), perm.end(), r2);
    CHECK(std::fabs(macro_ovr_auc(s, perm) - 0.5) <= 3.0 / std::sqrt(200.0));
  }
}

TEST_CASE("spearman with ties") {
  const std::vector<double> a = {1, 2, 3, 4, 5};
  const std::vector<double> b = {2, 4, 6, 8, 100};
  CHECK(spearman(a, b) == doctest::Approx(1.0));
  const std::vector<double> c = {5, 4, 3, 2, 1};
  CHECK(spearman(a, c) == doctest::Approx(-1.0));
  const std::vector<double> r = midranks(std::vector<double>{3, 1, 3, 2});
  CHECK(r == std::vector<double>{3.5, 1, 3.5, 2});
  CHECK(std::isnan(spearman(a, std::vector<double>(5, 1.0))));
}
