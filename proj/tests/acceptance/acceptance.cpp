// Acceptance suite: one status line per criterion. Status is PASS, FAIL,
// PARTIAL (every part that could run passed, some part could not run) or
// NOT-RUN. The exit code is non-zero only if some criterion FAILs.
//
// Usage: acceptance [criterion numbers...] [--json PATH]
// Optional local data: NRF_PNEUMONIAMNIST (path to pneumoniamnist.npz) and
// NRF_MEDMNIST_DIR (directory of MedMNIST .npz files).

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "json.hpp"
#include "nrf/archive.hpp"
#include "nrf/attacks.hpp"
#include "nrf/checkpoint.hpp"
#include "nrf/corruptions.hpp"
#include "nrf/datasets.hpp"
#include "nrf/distill.hpp"
#include "nrf/evaluation.hpp"
#include "nrf/graph.hpp"
#include "nrf/experiment.hpp"
#include "nrf/metrics.hpp"
#include "nrf/npy.hpp"
#include "nrf/training.hpp"
#include "reference_net.hpp"
#include "toy_models.hpp"

using namespace nrf;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  std::string status;  // PASS | FAIL | PARTIAL | NOT-RUN
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[1024];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

Outcome verdict(bool ok, std::string detail) { return {ok ? "PASS" : "FAIL", std::move(detail)}; }

std::optional<std::string> env_path(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v || !fs::exists(v)) return std::nullopt;
  return std::string(v);
}

// ---------------------------------------------------------------------------
// Desk protocol shared by the synthetic-corpus criteria.

ModelSpec desk_model(int channels, int classes) {
  ModelSpec m;
  m.arch = Arch::small_cnn;
  m.in_channels = channels;
  m.num_classes = classes;
  m.base_width = 8;
  return m;
}

TrainConfig desk_train(std::uint64_t seed) {
  TrainConfig t;
  t.lr = 0.05f;
  t.batch_size = 64;
  t.max_epochs = 10;
  t.augmentation = false;
  t.patience = 100;
  t.val_max_samples = 200;
  t.seed = seed;
  return t;
}

constexpr float kEps4 = 4.0f / 255.0f;
constexpr float kEps8 = 8.0f / 255.0f;
constexpr std::int64_t kAdvSamples = 500;

struct SeedModels {
  DatasetSplits data;
  std::optional<Model> base;
  std::map<int, Model> trades;  // keyed by epsilon in 1/255 units
};

// Lazily trained models reused across criteria.
class Shared {
 public:
  SeedModels& seed(std::uint64_t s) {
    auto& m = seeds_[s];
    if (m.data.train.size() == 0) {
      SyntheticSpec spec;
      spec.seed = s;
      m.data = make_synthetic(spec);
    }
    return m;
  }

  const Model& base(std::uint64_t s) {
    auto& m = seed(s);
    if (!m.base) {
      const auto t0 = Clock::now();
      m.base = train_standard(m.data.train, m.data.val, desk_model(1, 2), desk_train(s)).model;
      log("base model, seed %llu: %.0f s", static_cast<unsigned long long>(s), seconds_since(t0));
    }
    return *m.base;
  }

  const Model& trades(std::uint64_t s, int eps255) {
    auto& m = seed(s);
    auto it = m.trades.find(eps255);
    if (it == m.trades.end()) {
      const auto t0 = Clock::now();
      TradesConfig tr;
      tr.epsilon = static_cast<float>(eps255) / 255.0f;
      it = m.trades.emplace(eps255, train_trades(m.data.train, m.data.val, desk_model(1, 2), desk_train(s), tr).model).first;
      log("TRADES model eps %d/255, seed %llu: %.0f s", eps255, static_cast<unsigned long long>(s), seconds_since(t0));
    }
    return it->second;
  }

  // Nonrobust-only model from seed 0 plus the distillation bookkeeping.
  struct Distilled {
    DistilledDataset data;
    DistillAudit audit;
    Model model;
    double test_balacc = 0.0;
    std::vector<double> control_balacc;
    double seconds = 0.0;
  };
  const Distilled& distilled() {
    if (!distilled_) {
      const auto t0 = Clock::now();
      auto& m = seed(0);
      const Model& b = base(0);
      DistillConfig dc;
      dc.epsilon = kEps4;
      dc.steps = 100;
      dc.seed = 0;
      auto d = std::make_unique<Distilled>();
      d->data = build_nonrobust_dataset(b, m.data.train, dc);
      d->audit = audit_distilled(d->data, m.data.train, b, kEps4);
      d->model = train_standard(d->data.data, m.data.val, desk_model(1, 2), desk_train(0)).model;
      d->test_balacc = clean_balacc(d->model, m.data.test);
      TrainConfig cc = desk_train(0);
      cc.select_last = true;
      cc.max_epochs = 40;
      for (std::uint64_t r = 0; r < 3; ++r) {
        const ImageDataset perm = permuted_control(d->data, derive_seed(0, "control", r));
        cc.seed = derive_seed(0, "control_train", r);
        d->control_balacc.push_back(clean_balacc(train_standard(perm, m.data.val, desk_model(1, 2), cc).model, m.data.test));
      }
      d->seconds = seconds_since(t0);
      distilled_ = std::move(d);
    }
    return *distilled_;
  }

  // Ensemble robust balanced accuracy, memoised per (model name, epsilon).
  double robust(const std::string& name, const Model& model, float eps) {
    const auto key = name + "@" + std::to_string(eps);
    if (auto it = robust_.find(key); it != robust_.end()) return it->second;
    const auto& test = seed(0).data.test;
    const ImageDataset d = test.take(kAdvSamples);
    EnsembleConfig e;
    e.epsilon = eps;
    e.seed = derive_seed(0, "acceptance_attack");
    const auto t0 = Clock::now();
    const NetworkClassifier clf(model);
    const auto r = ensemble_eval(clf, d.images, d.labels, e);
    log("ensemble %s eps %.0f/255: robust %.4f (%.0f s)", name.c_str(), eps * 255.0f, r.robust_balacc, seconds_since(t0));
    return robust_[key] = r.robust_balacc;
  }

  static void log(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    std::fprintf(stderr, "  .. %s\n", buf);
  }

 private:
  std::map<std::uint64_t, SeedModels> seeds_;
  std::unique_ptr<Distilled> distilled_;
  std::map<std::string, double> robust_;
};

// ---------------------------------------------------------------------------

Outcome c1_gradients(Shared&) {
  std::mt19937 rng(101);
  ModelSpec s = desk_model(1, 3);
  s.base_width = 4;
  const Model m = build_small_cnn(s, 5);
  if (m.params.total_numel() > 10000) return {"FAIL", "test network exceeds 10k parameters"};
  Tensor x({3, 1, 8, 8});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : x.data()) v = u(rng);
  Tensor r({3, 3});
  std::uniform_real_distribution<float> ur(-1.0f, 1.0f);
  for (auto& v : r.data()) v = ur(rng);

  ParamSet buffers = m.buffers;
  Tape tape;
  tape.forward(m.graph, m.params, buffers, x, ForwardOptions{Mode::train, false});
  const Gradients g = tape.backward(r);
  const auto ref = testing::RefParams::from(m.params, m.buffers);
  const auto dx = testing::DTensor::from(x);
  const auto loss = [&](const testing::RefParams& rp, const testing::DTensor& in) {
    const auto out = testing::ref_forward(m.graph, rp, in, true);
    double acc = 0.0;
    for (std::size_t i = 0; i < out.v.size(); ++i) acc += out.v[i] * r[static_cast<std::int64_t>(i)];
    return acc;
  };
  const double h = 1e-3;
  double worst = 0.0;
  std::uniform_int_distribution<int> pick(0, m.params.size());
  for (int trial = 0; trial < 50; ++trial) {
    const int pi = pick(rng);
    double analytic, numeric;
    if (pi == m.params.size()) {
      const auto k = static_cast<std::size_t>(std::uniform_int_distribution<std::int64_t>(0, x.numel() - 1)(rng));
      auto plus = dx, minus = dx;
      plus.v[k] += h;
      minus.v[k] -= h;
      numeric = (loss(ref, plus) - loss(ref, minus)) / (2 * h);
      analytic = g.input[static_cast<std::int64_t>(k)];
    } else {
      const auto k = static_cast<std::size_t>(std::uniform_int_distribution<std::int64_t>(0, m.params[pi].numel() - 1)(rng));
      auto plus = ref, minus = ref;
      plus.params[static_cast<std::size_t>(pi)].v[k] += h;
      minus.params[static_cast<std::size_t>(pi)].v[k] -= h;
      numeric = (loss(plus, dx) - loss(minus, dx)) / (2 * h);
      analytic = g.params[static_cast<std::size_t>(pi)][static_cast<std::int64_t>(k)];
    }
    worst = std::max(worst, std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), 1e-3}));
  }
  return verdict(worst < 1e-3, fmt("worst relative error %.2e over 50 coordinates, %lld parameters", worst,
                                   static_cast<long long>(m.params.total_numel())));
}

Outcome c2_constraints(Shared&) {
  ModelSpec s = desk_model(3, 3);
  s.base_width = 4;
  const Model m = build_small_cnn(s, 9);
  const NetworkClassifier clf(m);
  std::mt19937 rng(202);
  const auto images = [&](std::int64_t n) {
    Tensor x({n, 3, 8, 8});
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : x.data()) {
      const float r = u(rng);
      v = r < 0.1f ? 0.0f : (r > 0.9f ? 1.0f : u(rng));  // plenty of pixels on the box faces
    }
    return x;
  };
  const auto labels = [&](std::int64_t n) {
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(rng() % 3);
    return y;
  };
  std::int64_t total = 0, violations = 0;
  const auto check = [&](const Tensor& x, const AttackResult& r, float eps) {
    total += x.size(0);
    violations += constraint_violations(x, r.adversarial, eps, 1e-6f);
  };
  for (float eps : {kEps4, kEps8}) {
    AttackConfig a;
    a.epsilon = eps;
    a.steps = 5;
    a.restarts = 2;
    a.seed = 1;
    {
      const Tensor x = images(1700);
      const auto y = labels(1700);
      check(x, pgd(clf, x, y, a), eps);
      a.loss = AttackLoss::margin;
      check(x, pgd(clf, x, y, a), eps);
      a.loss = AttackLoss::ce;
    }
    {
      const Tensor x = images(1700);
      const auto t = labels(1700);
      check(x, pgd_targeted(clf, x, t, a), eps);
    }
    {
      const Tensor x = images(1700);
      const auto y = labels(1700);
      AttackConfig q = a;
      q.steps = 40;
      check(x, square_attack(clf, x, y, q), eps);
    }
  }
  return verdict(total >= 10000 && violations == 0,
                 fmt("%lld adversarial examples (PGD-CE, PGD-margin, targeted PGD, square; eps 4/255 and 8/255), %lld violations",
                     static_cast<long long>(total), static_cast<long long>(violations)));
}

Outcome c3_linear_pgd(Shared&) {
  std::mt19937 rng(303);
  const std::int64_t d = 3 * 8 * 8, n = 64;
  Tensor W({2, d}, 0.0f);
  std::normal_distribution<float> nd;
  for (std::int64_t j = 0; j < d; ++j) {
    float w = nd(rng);
    if (w == 0.0f) w = 1.0f;
    W[d + j] = w;
  }
  const testing::AffineClassifier clf(W, Tensor({2}, 0.0f));
  Tensor x({n, 3, 8, 8});
  std::uniform_real_distribution<float> u(0.1f, 0.9f);
  for (auto& v : x.data()) v = u(rng);
  const std::vector<int> y(static_cast<std::size_t>(n), 0);
  std::int64_t mismatches = 0, checked = 0;
  for (float eps : {kEps4, kEps8}) {
    AttackConfig a;
    a.epsilon = eps;
    a.steps = 1;
    a.step_size = eps;
    a.random_start = false;
    const auto r = pgd(clf, x, y, a);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < d; ++j) {
        const float want = x[i * d + j] + eps * (W[d + j] > 0.0f ? 1.0f : -1.0f);
        mismatches += r.adversarial[i * d + j] != want;
        ++checked;
      }
  }
  return verdict(mismatches == 0, fmt("%lld of %lld coordinates differ from x + eps*sign(w)", static_cast<long long>(mismatches),
                                      static_cast<long long>(checked)));
}

Outcome c4_distillation(Shared& sh) {
  const auto& d = sh.distilled();
  double control = 0.0;
  for (double c : d.control_balacc) control += c;
  control /= static_cast<double>(d.control_balacc.size());
  const bool ok = d.audit.ok && d.test_balacc >= 0.65 && std::fabs(control - 0.5) <= 0.03 && d.seconds < 600.0;
  return verdict(ok, fmt("nonrobust-only model %.4f on original test labels (need >= 0.65); permuted control %.4f "
                         "(mean of %.4f %.4f %.4f, need 0.50 +- 0.03); %lld distilled samples, retention %.3f, "
                         "target chi2 p %.3f, max Linf %.5f; %.0f s",
                         d.test_balacc, control, d.control_balacc[0], d.control_balacc[1], d.control_balacc[2],
                         static_cast<long long>(d.data.data.size()), d.data.retention_rate(), d.audit.chi2_p,
                         d.audit.max_linf, d.seconds));
}

struct Ordering {
  double base_clean, base_ood, trades_clean, trades_ood;
  bool ok() const { return trades_ood >= base_ood && base_clean >= trades_clean; }
};

Ordering ordering_on(const Model& base, const Model& trades, const ImageDataset& test, std::uint64_t seed) {
  const auto set = benchmark_set(seed);
  return {clean_balacc(base, test), corrupted_eval(base, test, set).ood_balanced_accuracy, clean_balacc(trades, test),
          corrupted_eval(trades, test, set).ood_balanced_accuracy};
}

Outcome c5_robustness_ordering(Shared& sh) {
  const auto t0 = Clock::now();
  std::string detail = "synthetic:";
  int held = 0;
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto o = ordering_on(sh.base(s), sh.trades(s, 4), sh.seed(s).data.test, s);
    held += o.ok();
    detail += fmt(" seed %llu base %.3f/%.3f trades %.3f/%.3f (clean/ood)%s;", static_cast<unsigned long long>(s),
                  o.base_clean, o.base_ood, o.trades_clean, o.trades_ood, o.ok() ? "" : " VIOLATED");
  }
  detail += fmt(" %d/3 seeds hold.", held);
  const bool synthetic_ok = held == 3;
  const auto pneu = env_path("NRF_PNEUMONIAMNIST");
  if (!pneu) {
    detail += fmt(" PneumoniaMNIST part not run: set NRF_PNEUMONIAMNIST to a local pneumoniamnist.npz. %.0f s", seconds_since(t0));
    return {synthetic_ok ? "PARTIAL" : "FAIL", detail};
  }
  const DatasetSplits full = load_medmnist(*pneu);
  int pheld = 0;
  detail += " pneumoniamnist:";
  for (std::uint64_t s = 0; s < 3; ++s) {
    const ImageDataset train = stratified_subsample(full.train, 2000, derive_seed(s, "pneumonia_train"));
    const ImageDataset val = stratified_subsample(full.val, 500, derive_seed(s, "pneumonia_val"));
    const ModelSpec ms = desk_model(static_cast<int>(train.channels()), train.num_classes);
    const Model base = train_standard(train, val, ms, desk_train(s)).model;
    TradesConfig tr;
    tr.epsilon = kEps4;
    const Model rob = train_trades(train, val, ms, desk_train(s), tr).model;
    const auto o = ordering_on(base, rob, full.test, s);
    pheld += o.ok();
    detail += fmt(" seed %llu base %.3f/%.3f trades %.3f/%.3f%s;", static_cast<unsigned long long>(s), o.base_clean,
                  o.base_ood, o.trades_clean, o.trades_ood, o.ok() ? "" : " VIOLATED");
  }
  detail += fmt(" %d/3 seeds hold. %.0f s", pheld, seconds_since(t0));
  return verdict(synthetic_ok && pheld == 3, detail);
}

Outcome c6_adversarial_ordering(Shared& sh) {
  const auto t0 = Clock::now();
  const double base = sh.robust("base", sh.base(0), kEps4);
  const double nonrobust = sh.robust("nonrobust", sh.distilled().model, kEps4);
  const double trades = sh.robust("trades4", sh.trades(0, 4), kEps4);
  const bool ok = base <= 0.05 && nonrobust <= 0.05 && trades - std::max(base, nonrobust) >= 0.30;
  return verdict(ok, fmt("ensemble eps 4/255 on %lld test images: base %.4f, nonrobust-only %.4f (need <= 0.05), "
                         "TRADES %.4f (need >= 0.30 above both); %.0f s (excluding shared training)",
                         static_cast<long long>(kAdvSamples), base, nonrobust, trades, seconds_since(t0)));
}

Outcome c7_epsilon_monotonicity(Shared& sh) {
  const auto t0 = Clock::now();
  struct Entry {
    const char* name;
    const Model* model;
  };
  const std::vector<Entry> models = {{"base", &sh.base(0)},
                                     {"nonrobust", &sh.distilled().model},
                                     {"trades4", &sh.trades(0, 4)},
                                     {"trades8", &sh.trades(0, 8)}};
  bool ok = true;
  std::string detail = "robust balanced accuracy 4/255 -> 8/255:";
  for (const auto& e : models) {
    const double r4 = sh.robust(e.name, *e.model, kEps4), r8 = sh.robust(e.name, *e.model, kEps8);
    ok &= r8 <= r4;
    detail += fmt(" %s %.4f -> %.4f;", e.name, r4, r8);
  }
  const auto& test = sh.seed(0).data.test;
  const double c4 = clean_balacc(sh.trades(0, 4), test), c8 = clean_balacc(sh.trades(0, 8), test);
  ok &= c8 <= c4;
  detail += fmt(" clean TRADES@4 %.4f vs TRADES@8 %.4f; %.0f s", c4, c8, seconds_since(t0));
  return verdict(ok, detail);
}

Outcome c8_metric_oracles(Shared&) {
  std::mt19937 rng(808);
  double worst_ba = 0.0, worst_auc = 0.0;
  for (int t = 0; t < 100; ++t) {
    const int c = 2 + static_cast<int>(rng() % 9);
    std::vector<int> y, p;
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j) {
        const int cnt = static_cast<int>(rng() % 20) + (i == j ? 1 : 0);
        for (int k = 0; k < cnt; ++k) y.push_back(i), p.push_back(j);
      }
    const ConfusionMatrix cm = ConfusionMatrix::from(y, p, c);
    long double sum = 0.0L;
    for (int i = 0; i < c; ++i) {
      long double row = 0.0L, diag = 0.0L;
      for (std::size_t k = 0; k < y.size(); ++k)
        if (y[k] == i) row += 1.0L, diag += p[k] == i ? 1.0L : 0.0L;
      sum += diag / row;
    }
    worst_ba = std::max(worst_ba, static_cast<double>(std::fabs(static_cast<long double>(balanced_accuracy(cm)) - sum / c)));
  }
  for (int t = 0; t < 200; ++t) {
    const int c = 2 + static_cast<int>(rng() % 4);
    const int n = c + static_cast<int>(rng() % static_cast<unsigned>(51 - c));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = i < c ? i : static_cast<int>(rng() % static_cast<unsigned>(c));
    Tensor s({n, c});
    for (auto& v : s.data()) v = static_cast<float>(rng() % 7) / 7.0f;  // coarse grid: many ties
    double macro = 0.0;
    for (int k = 0; k < c; ++k) {
      double wins = 0.0, pairs = 0.0;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          if (y[static_cast<std::size_t>(i)] != k || y[static_cast<std::size_t>(j)] == k) continue;
          const float a = s[i * c + k], b = s[j * c + k];
          wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
          pairs += 1.0;
        }
      macro += wins / pairs;
    }
    macro /= c;
    worst_auc = std::max(worst_auc, std::fabs(macro_ovr_auc(s, y) - macro));
  }
  return verdict(worst_ba <= 1e-12 && worst_auc <= 1e-12,
                 fmt("balanced accuracy max |diff| %.1e over 100 matrices; macro OvR AUC max |diff| %.1e over 200 instances",
                     worst_ba, worst_auc));
}

Outcome c9_corruptions(Shared&) {
  const auto t0 = Clock::now();
  std::string detail;
  bool ok = true;
  for (int size : {32, 16}) {
    SyntheticSpec spec;
    spec.size = size;
    spec.train_per_class = 1;
    spec.val_per_class = 1;
    spec.test_per_class = 100;
    spec.seed = 9;
    const Tensor x = make_synthetic(spec).test.images;
    bool identical = true;
    std::vector<std::string> non_monotone;
    for (CorruptionKind k : benchmark_corruptions()) {
      double prev = -1.0;
      for (int sev = 1; sev <= 5; ++sev) {
        const CorruptionSpec c{k, sev, 77, std::nullopt};
        const Tensor a = apply_corruption(x, c, 0, 1), b = apply_corruption(x, c, 0, 1), w = apply_corruption(x, c, 0, 4);
        identical &= std::memcmp(a.ptr(), b.ptr(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0 &&
                     std::memcmp(a.ptr(), w.ptr(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0;
        double l2 = 0.0;
        const auto per = x.row_numel();
        for (std::int64_t i = 0; i < x.size(0); ++i) {
          double s2 = 0.0;
          for (std::int64_t j = 0; j < per; ++j) {
            const double dlt = static_cast<double>(a[i * per + j]) - x[i * per + j];
            s2 += dlt * dlt;
          }
          l2 += std::sqrt(s2);
        }
        l2 /= static_cast<double>(x.size(0));
        if (l2 < prev) non_monotone.push_back(fmt("%s %d->%d (%.4f->%.4f)", corruption_name(k).c_str(), sev - 1, sev, prev, l2));
        prev = l2;
      }
    }
    const bool part = identical && non_monotone.empty();
    if (size == 32) ok = part;
    detail += fmt("%dx%d: %s, %s", size, size, identical ? "byte-identical across runs and 1/4 workers" : "NOT byte-identical",
                  non_monotone.empty() ? "L2 non-decreasing for all 7 kinds" : "non-monotone:");
    for (const auto& s : non_monotone) detail += " " + s;
    detail += size == 32 ? "; " : " (informational)";
  }
  detail += fmt("; %.0f s", seconds_since(t0));
  return verdict(ok, detail);
}

Outcome c10_formats(Shared& sh) {
  std::mt19937 rng(1010);
  bool ok = true;
  // NPY / NPZ bitwise round trip for every supported dtype.
  Tensor f({3, 5, 7});
  std::normal_distribution<float> nd;
  for (auto& v : f.data()) v = nd(rng);
  f[0] = -0.0f;
  f[1] = std::numeric_limits<float>::denorm_min();
  f[2] = std::numeric_limits<float>::infinity();
  std::vector<std::uint8_t> u8(60);
  for (auto& v : u8) v = static_cast<std::uint8_t>(rng());
  std::vector<std::int64_t> i64(11);
  for (auto& v : i64) v = static_cast<std::int64_t>(rng()) - (std::int64_t{1} << 40);
  Npz npz;
  npz.arrays["f"] = NpyArray::from_tensor(f);
  npz.arrays["u"] = NpyArray::from_u8({3, 4, 5}, u8);
  npz.arrays["i"] = NpyArray::from_i64({11}, i64);
  npz.texts["metadata.json"] = R"({"k":1})";
  for (bool compress : {false, true}) {
    const auto bytes = write_npz(npz, compress);
    const Npz back = read_npz(ZipArchive::from_bytes(bytes));
    for (const auto& [k, a] : npz.arrays) {
      const auto& b = back.arrays.at(k);
      ok &= a.dtype == b.dtype && a.shape == b.shape && a.data == b.data && write_npy(a) == write_npy(b);
    }
    ok &= back.texts.at("metadata.json") == npz.texts.at("metadata.json");
    ok &= write_npz(back, compress) == bytes;
  }
  // Checkpoint: forward outputs bitwise identical after save/load.
  const Model& base = sh.base(0);
  const auto path = (fs::temp_directory_path() / "nrf_acceptance.ckpt").string();
  save_checkpoint(path, base);
  const Checkpoint ck = load_checkpoint(path);
  const Tensor x = sh.seed(0).data.test.take(256).images;
  const Tensor z0 = predict_logits(base, x), z1 = predict_logits(ck.model, x);
  const bool ckpt_ok = std::memcmp(z0.ptr(), z1.ptr(), sizeof(float) * static_cast<std::size_t>(z0.numel())) == 0;
  ok &= ckpt_ok;
  fs::remove(path);
  std::string detail = fmt("NPY/NPZ round trip (f32, u8, i64; stored and deflated) %s; checkpoint forward outputs %s",
                           ok ? "bitwise identical" : "MISMATCH", ckpt_ok ? "bitwise identical" : "DIFFER");
  // Real MedMNIST archives, when available locally.
  std::vector<std::string> files;
  if (const auto dir = env_path("NRF_MEDMNIST_DIR")) {
    for (const auto& e : fs::directory_iterator(*dir))
      if (e.path().extension() == ".npz") files.push_back(e.path().string());
  }
  if (const auto p = env_path("NRF_PNEUMONIAMNIST")) files.push_back(*p);
  if (files.empty()) {
    detail += "; real MedMNIST loading not run (no NRF_MEDMNIST_DIR / NRF_PNEUMONIAMNIST)";
  } else {
    for (const auto& file : files) {
      const DatasetSplits s = load_medmnist(file);
      const int expect = medmnist_num_classes(file);
      bool fine = true;
      for (const ImageDataset* d : {&s.train, &s.val, &s.test}) {
        fine &= d->images.dim() == 4 && d->height() == d->width() && (d->channels() == 1 || d->channels() == 3);
        fine &= expect < 0 || d->num_classes == expect;
      }
      ok &= fine;
      detail += fmt("; %s: train %lld x %lldx%lldx%lld, %d classes %s", fs::path(file).filename().c_str(),
                    static_cast<long long>(s.train.size()), static_cast<long long>(s.train.channels()),
                    static_cast<long long>(s.train.height()), static_cast<long long>(s.train.width()), s.train.num_classes,
                    fine ? "ok" : "UNEXPECTED");
    }
  }
  return verdict(ok, detail);
}

Outcome c11_trades_degeneracy(Shared& sh) {
  const auto& data = sh.seed(0).data;
  const ImageDataset train = stratified_subsample(data.train, 400, 11);
  const ImageDataset val = data.val.take(100);
  TrainConfig t = desk_train(11);
  t.max_epochs = 4;
  t.augmentation = true;
  TradesConfig tr;
  tr.beta = 0.0f;
  tr.epsilon = kEps4;
  const auto a = train_standard(train, val, desk_model(1, 2), t);
  const auto b = train_trades(train, val, desk_model(1, 2), t, tr);
  double worst = 0.0;
  bool same_len = a.epochs.size() == b.epochs.size();
  for (std::size_t e = 0; same_len && e < a.epochs.size(); ++e) {
    worst = std::max({worst, std::fabs(a.epochs[e].train_loss - b.epochs[e].train_loss),
                      std::fabs(a.epochs[e].clean_val_balacc - b.epochs[e].clean_val_balacc),
                      std::fabs(a.epochs[e].lr - b.epochs[e].lr)});
  }
  return verdict(same_len && worst <= 1e-6, fmt("%zu epochs, max |diff| of per-epoch loss / val balanced accuracy / lr = %.2e",
                                                a.epochs.size(), worst));
}

Outcome c12_grid(Shared&) {
  bool ok = true;
  std::string detail;
  for (RunKind k : {RunKind::standard, RunKind::nonrobust})
    for (SizeClass s : {SizeClass::large, SizeClass::small}) {
      const auto n = expand_grid(GridSpec::reference(k, s), TrainConfig{}).size();
      ok &= n == 32;
      detail += fmt("%s/%s %zu configs; ", run_kind_name(k).c_str(), size_class_name(s).c_str(), n);
    }
  // Selection over an archive holding all three splits never reads the test members.
  SyntheticSpec spec;
  spec.size = 8;
  spec.train_per_class = 40;
  spec.val_per_class = 20;
  spec.test_per_class = 20;
  const auto splits = make_synthetic(spec);
  const auto dir = fs::temp_directory_path() / "nrf_acceptance_grid";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto path = (dir / "data.npz").string();
  save_dataset(path, {&splits.train, &splits.val, &splits.test});
  AccessLog::global().clear();
  const auto zip = ZipArchive::open(path);
  const auto train = load_split(zip, "train"), val = load_split(zip, "val");
  ExperimentConfig cfg;
  cfg.model = desk_model(1, 2);
  cfg.model.base_width = 4;
  TrainConfig t;
  t.max_epochs = 1;
  t.augmentation = false;
  GridSpec g = GridSpec::reference(RunKind::standard, SizeClass::small);
  g.batch_sizes = {32, 16};
  g.max_epochs = {1};
  const auto records = run_grid(expand_grid(g, t), RunKind::standard, train, val, cfg.model, nullptr, (dir / "runs").string(),
                                "audit", cfg);
  const auto& best = select_best(records);
  const bool untouched = !AccessLog::global().touched("test_");
  const auto test = load_split(zip, "test");
  const bool logged = AccessLog::global().touched("test_");
  fs::remove_all(dir);
  ok &= untouched && logged && records.size() == 8;
  detail += fmt("audit: %zu-run grid selected %s with test members %s during selection; the log records the later test read: %s",
                records.size(), best.run_id.c_str(), untouched ? "never read" : "READ", logged ? "yes" : "NO");
  (void)test;
  return verdict(ok, detail);
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  std::set<int> wanted;
  std::string json_path;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--json" && i + 1 < argc) json_path = argv[++i];
    else wanted.insert(std::atoi(a.c_str()));
  }
  using Fn = Outcome (*)(Shared&);
  const std::vector<std::pair<const char*, Fn>> criteria = {
      {"gradient correctness", c1_gradients},
      {"attack constraint suite", c2_constraints},
      {"linear-model PGD oracle", c3_linear_pgd},
      {"synthetic distillation", c4_distillation},
      {"robustness ordering", c5_robustness_ordering},
      {"adversarial ordering", c6_adversarial_ordering},
      {"epsilon monotonicity", c7_epsilon_monotonicity},
      {"metric oracles", c8_metric_oracles},
      {"corruption determinism and monotonicity", c9_corruptions},
      {"format fidelity", c10_formats},
      {"TRADES beta=0 degeneracy", c11_trades_degeneracy},
      {"grid bookkeeping", c12_grid},
  };
  Shared shared;
  json results = json::array();
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second(shared);
    } catch (const std::exception& e) {
      o = {"FAIL", std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    failures += o.status == "FAIL";
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.status.c_str(), id, criteria[i].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    results.push_back({{"criterion", id}, {"name", criteria[i].first}, {"status", o.status}, {"detail", o.detail}, {"seconds", secs}});
  }
  if (!json_path.empty()) write_text_file(json_path, results.dump(2));
  return failures == 0 ? 0 : 1;
}
