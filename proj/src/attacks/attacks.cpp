#include "nrf/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "nrf/losses.hpp"
#include "nrf/metrics.hpp"
#include "nrf/ops.hpp"
#include "nrf/rng.hpp"

namespace nrf {
namespace {

void copy_row(const Tensor& src, std::int64_t from, Tensor& dst, std::int64_t to) {
  const auto d = src.row_numel();
  std::copy_n(src.ptr() + from * d, d, dst.ptr() + to * d);
}

void project(const Tensor& x0, Tensor& adv, std::int64_t row, float eps) {
  const auto d = x0.row_numel();
  const float* o = x0.ptr() + row * d;
  float* a = adv.ptr() + row * d;
  for (std::int64_t k = 0; k < d; ++k) {
    a[k] = std::clamp(std::clamp(a[k], o[k] - eps, o[k] + eps), 0.0f, 1.0f);
  }
}

void random_start(const Tensor& x0, Tensor& adv, std::int64_t row, float eps, std::uint64_t stream,
                  std::int64_t global_index) {
  Rng rng(stream, "sample", static_cast<std::uint64_t>(global_index));
  const auto d = x0.row_numel();
  for (std::int64_t k = 0; k < d; ++k) adv[row * d + k] = x0[row * d + k] + rng.uniform(-eps, eps);
  project(x0, adv, row, eps);
}

bool row_finite(const Tensor& t, std::int64_t row) {
  const auto d = t.row_numel();
  for (std::int64_t k = 0; k < d; ++k) {
    if (!std::isfinite(t[row * d + k])) return false;
  }
  return true;
}

// Loss in the direction the attack ascends; targeted attacks ascend -loss.
std::vector<double> objective(const Tensor& z, std::span<const int> ref, AttackLoss loss, bool targeted,
                              const Tensor& p_clean) {
  std::vector<double> v;
  switch (loss) {
    case AttackLoss::ce: v = ce_per_sample(z, ref); break;
    case AttackLoss::margin: v = margin_per_sample(z, ref); break;
    case AttackLoss::kl: {
      const auto n = z.size(0), c = z.size(1);
      const Tensor lq = ops::log_softmax(z);
      v.assign(static_cast<std::size_t>(n), 0.0);
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t k = 0; k < c; ++k) {
          const double p = p_clean[i * c + k];
          if (p > 0.0) v[static_cast<std::size_t>(i)] += p * (std::log(p) - std::max<double>(lq[i * c + k], std::log(1e-12)));
        }
      break;
    }
  }
  if (targeted) {
    for (auto& e : v) e = -e;
  }
  return v;
}

// d(sum of per-sample loss)/dz, before the targeted sign flip.
Tensor loss_seed(const Tensor& z, std::span<const int> ref, AttackLoss loss, const Tensor& p_clean) {
  const auto n = z.size(0), c = z.size(1);
  Tensor g(z.shape());
  if (loss == AttackLoss::margin) {
    for (std::int64_t i = 0; i < n; ++i) {
      const int y = ref[static_cast<std::size_t>(i)];
      std::int64_t other = -1;
      for (std::int64_t k = 0; k < c; ++k) {
        if (k != y && (other < 0 || z[i * c + k] > z[i * c + other])) other = k;
      }
      g[i * c + other] = 1.0f;
      g[i * c + y] = -1.0f;
    }
    return g;
  }
  const Tensor p = ops::softmax(z);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t k = 0; k < c; ++k) {
      const float target = loss == AttackLoss::kl ? p_clean[i * c + k] : (k == ref[static_cast<std::size_t>(i)] ? 1.0f : 0.0f);
      g[i * c + k] = p[i * c + k] - target;
    }
  return g;
}

bool is_success(int pred, int ref, bool targeted) { return targeted ? pred == ref : pred != ref; }

void verify(const Classifier& model, std::span<const int> ref, bool targeted, std::int64_t batch, AttackResult& r) {
  r.predictions.assign(ref.size(), 0);
  r.success.assign(ref.size(), 0);
  const auto n = r.adversarial.size(0);
  for (std::int64_t b = 0; b < n; b += batch) {
    const auto e = std::min(n, b + batch);
    const auto pred = argmax_rows(model.logits(r.adversarial.slice_rows(b, e)));
    for (std::int64_t i = b; i < e; ++i) {
      r.predictions[static_cast<std::size_t>(i)] = pred[static_cast<std::size_t>(i - b)];
      r.success[static_cast<std::size_t>(i)] = is_success(pred[static_cast<std::size_t>(i - b)], ref[static_cast<std::size_t>(i)], targeted);
    }
  }
}

void check_inputs(const Classifier& model, const Tensor& x, std::span<const int> ref, const char* what) {
  if (x.dim() != 4) throw std::invalid_argument(std::string(what) + ": input must be [N,C,H,W]");
  if (x.size(0) != static_cast<std::int64_t>(ref.size())) throw std::invalid_argument(std::string(what) + ": label count mismatch");
  for (int y : ref) {
    if (y < 0 || y >= model.num_classes()) throw std::out_of_range(std::string(what) + ": label outside [0, num_classes)");
  }
}

AttackResult run_pgd(const Classifier& model, const Tensor& x, std::span<const int> ref, const AttackConfig& cfg,
                     bool targeted) {
  cfg.validate();
  check_inputs(model, x, ref, targeted ? "pgd_targeted" : "pgd");
  const float eps = cfg.epsilon;
  const float alpha = cfg.alpha();
  const float dir = targeted ? -1.0f : 1.0f;
  AttackResult result;
  result.adversarial = x;
  const auto n = x.size(0);
  for (std::int64_t b = 0; b < n; b += cfg.batch_size) {
    const auto e = std::min(n, b + cfg.batch_size);
    const auto m = e - b;
    const Tensor xc = x.slice_rows(b, e);
    Tensor best = xc;
    std::vector<double> best_loss(static_cast<std::size_t>(m), -INFINITY);
    std::vector<char> best_hit(static_cast<std::size_t>(m), 0);
    Tensor p_clean_all;
    if (cfg.loss == AttackLoss::kl) p_clean_all = ops::softmax(model.logits(xc));

    for (int r = 0; r < cfg.restarts; ++r) {
      std::vector<std::int64_t> act;
      for (std::int64_t i = 0; i < m; ++i) {
        if (!best_hit[static_cast<std::size_t>(i)]) act.push_back(i);
      }
      if (act.empty()) break;
      const auto k = static_cast<std::int64_t>(act.size());
      const Tensor x0 = xc.gather_rows(act);
      std::vector<int> la(act.size());
      for (std::size_t i = 0; i < act.size(); ++i) la[i] = ref[static_cast<std::size_t>(b + act[i])];
      const Tensor pc = cfg.loss == AttackLoss::kl ? p_clean_all.gather_rows(act) : Tensor();

      Tensor adv = x0;
      std::vector<int> attempts(act.size(), 0);
      auto start = [&](std::int64_t i) {
        if (!cfg.random_start) {
          copy_row(x0, i, adv, i);
          return;
        }
        const auto stream = derive_seed(cfg.seed, targeted ? "pgdt_start" : "pgd_start",
                                        static_cast<std::uint64_t>(r) * 64u + static_cast<std::uint64_t>(attempts[static_cast<std::size_t>(i)]));
        random_start(x0, adv, i, eps, stream, b + act[static_cast<std::size_t>(i)]);
      };
      for (std::int64_t i = 0; i < k; ++i) start(i);

      std::vector<char> hit(act.size(), 0);
      Tensor hit_img = x0;
      auto record = [&](const Tensor& z) {
        const auto pred = argmax_rows(z);
        for (std::int64_t i = 0; i < k; ++i) {
          if (is_success(pred[static_cast<std::size_t>(i)], la[static_cast<std::size_t>(i)], targeted)) {
            hit[static_cast<std::size_t>(i)] = 1;
            copy_row(adv, i, hit_img, i);
          }
        }
      };
      const auto d = x0.row_numel();
      for (int s = 0; s < cfg.steps; ++s) {
        Tensor z;
        const Tensor g = model.input_gradient(
            adv, [&](const Tensor& logits) { return loss_seed(logits, la, cfg.loss, pc); }, &z);
        record(z);
        for (std::int64_t i = 0; i < k; ++i) {
          if (!row_finite(g, i)) {
            ++result.nonfinite_restarts;
            ++attempts[static_cast<std::size_t>(i)];
            spdlog::warn("pgd: non-finite gradient for sample {}; restarting its trajectory", b + act[static_cast<std::size_t>(i)]);
            start(i);
            continue;
          }
          float* a = adv.ptr() + i * d;
          const float* gi = g.ptr() + i * d;
          for (std::int64_t q = 0; q < d; ++q) {
            const float sg = gi[q] > 0.0f ? 1.0f : (gi[q] < 0.0f ? -1.0f : 0.0f);
            a[q] += dir * alpha * sg;
          }
          project(x0, adv, i, eps);
        }
      }
      const Tensor zf = model.logits(adv);
      record(zf);
      const auto lossv = objective(zf, la, cfg.loss, targeted, pc);
      for (std::int64_t i = 0; i < k; ++i) {
        const auto gi = act[static_cast<std::size_t>(i)];
        if (hit[static_cast<std::size_t>(i)]) {
          best_hit[static_cast<std::size_t>(gi)] = 1;
          copy_row(hit_img, i, best, gi);
        } else if (lossv[static_cast<std::size_t>(i)] > best_loss[static_cast<std::size_t>(gi)]) {
          best_loss[static_cast<std::size_t>(gi)] = lossv[static_cast<std::size_t>(i)];
          copy_row(adv, i, best, gi);
        }
      }
    }
    for (std::int64_t i = 0; i < m; ++i) copy_row(best, i, result.adversarial, b + i);
  }
  verify(model, ref, targeted, cfg.batch_size, result);
  return result;
}

}  // namespace

std::string attack_loss_name(AttackLoss loss) {
  switch (loss) {
    case AttackLoss::ce: return "ce";
    case AttackLoss::margin: return "margin";
    case AttackLoss::kl: return "kl";
  }
  return "?";
}

AttackLoss parse_attack_loss(const std::string& name) {
  if (name == "ce") return AttackLoss::ce;
  if (name == "margin") return AttackLoss::margin;
  if (name == "kl") return AttackLoss::kl;
  throw std::invalid_argument("unknown attack loss '" + name + "' (expected ce, margin or kl)");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0f && epsilon < 1.0f)) throw std::invalid_argument("attack: epsilon must be in [0,1)");
  if (steps < 0) throw std::invalid_argument("attack: steps must be >= 0");
  if (!(step_size >= 0.0f) || !std::isfinite(step_size)) throw std::invalid_argument("attack: step_size must be >= 0");
  if (restarts < 1) throw std::invalid_argument("attack: restarts must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("attack: batch_size must be >= 1");
}

double AttackResult::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), 1)) / static_cast<double>(success.size());
}

AttackResult pgd(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg) {
  return run_pgd(model, x, labels, cfg, false);
}

AttackResult pgd_targeted(const Classifier& model, const Tensor& x, std::span<const int> targets, const AttackConfig& cfg) {
  return run_pgd(model, x, targets, cfg, true);
}

float square_p_schedule(float p_init, std::int64_t it, std::int64_t budget) {
  const auto i = budget > 0 ? static_cast<std::int64_t>(static_cast<double>(it) / static_cast<double>(budget) * 10000.0) : 0;
  static constexpr std::int64_t edges[] = {10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000};
  float p = p_init;
  for (auto edge : edges) {
    if (i > edge) p /= 2.0f;
  }
  return p;
}

AttackResult square_attack(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg,
                           std::vector<std::vector<float>>* loss_trace) {
  cfg.validate();
  check_inputs(model, x, labels, "square_attack");
  AttackResult result;
  result.adversarial = x;
  const auto n = x.size(0);
  if (loss_trace) loss_trace->assign(static_cast<std::size_t>(n), {});
  if (cfg.steps == 0 || n == 0) {
    verify(model, labels, false, cfg.batch_size, result);
    return result;
  }
  const float eps = cfg.epsilon;
  const auto ch = x.size(1), h = x.size(2), w = x.size(3);
  const auto plane = h * w;
  const auto d = x.row_numel();
  constexpr float p_init = 0.8f;
  auto margin = [&](const Tensor& z, std::span<const int> y) {
    auto m = margin_per_sample(z, y);
    for (auto& v : m) v = -v;  // z_true - max_other; success when < 0
    return m;
  };
  for (std::int64_t b = 0; b < n; b += cfg.batch_size) {
    const auto e = std::min(n, b + cfg.batch_size);
    const auto m = e - b;
    const Tensor xc = x.slice_rows(b, e);
    std::span<const int> yc = labels.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(m));
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) rngs.emplace_back(derive_seed(cfg.seed, "square"), "sample", static_cast<std::uint64_t>(b + i));

    // Vertical stripes of +-eps per (channel, column).
    Tensor best = xc;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t c = 0; c < ch; ++c)
        for (std::int64_t col = 0; col < w; ++col) {
          const float s = rngs[static_cast<std::size_t>(i)].coin() ? eps : -eps;
          for (std::int64_t row = 0; row < h; ++row) {
            const auto at = i * d + c * plane + row * w + col;
            best[at] = std::clamp(xc[at] + s, 0.0f, 1.0f);
          }
        }
    auto best_margin = margin(model.logits(best), yc);
    std::vector<std::int64_t> queries(static_cast<std::size_t>(m), 1);
    if (loss_trace) {
      for (std::int64_t i = 0; i < m; ++i) (*loss_trace)[static_cast<std::size_t>(b + i)].push_back(static_cast<float>(best_margin[static_cast<std::size_t>(i)]));
    }
    for (std::int64_t it = 1; it < cfg.steps; ++it) {
      std::vector<std::int64_t> act;
      for (std::int64_t i = 0; i < m; ++i) {
        if (best_margin[static_cast<std::size_t>(i)] >= 0.0) act.push_back(i);
      }
      if (act.empty()) break;
      const float p = square_p_schedule(p_init, it, cfg.steps);
      auto s = static_cast<std::int64_t>(std::lround(std::sqrt(p * static_cast<float>(plane))));
      s = std::clamp<std::int64_t>(s, 1, std::max<std::int64_t>(1, std::min(h, w) - 1));
      Tensor cand = best.gather_rows(act);
      for (std::size_t a = 0; a < act.size(); ++a) {
        const auto i = act[a];
        Rng& rng = rngs[static_cast<std::size_t>(i)];
        const auto r0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(h - s + 1)));
        const auto c0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w - s + 1)));
        // Redraw signs until the window actually changes (bounded).
        for (int tries = 0; tries < 10; ++tries) {
          bool changed = false;
          for (std::int64_t c = 0; c < ch; ++c) {
            const float sgn = rng.coin() ? eps : -eps;
            for (std::int64_t rr = r0; rr < r0 + s; ++rr)
              for (std::int64_t cc = c0; cc < c0 + s; ++cc) {
                const auto src = i * d + c * plane + rr * w + cc;
                const auto dst = static_cast<std::int64_t>(a) * d + c * plane + rr * w + cc;
                const float v = std::clamp(xc[src] + sgn, 0.0f, 1.0f);
                if (std::fabs(v - best[src]) >= 1e-7f) changed = true;
                cand[dst] = v;
              }
          }
          if (changed) break;
        }
      }
      std::vector<int> ya(act.size());
      for (std::size_t a = 0; a < act.size(); ++a) ya[a] = yc[static_cast<std::size_t>(act[a])];
      const auto cand_margin = margin(model.logits(cand), ya);
      for (std::size_t a = 0; a < act.size(); ++a) {
        const auto i = static_cast<std::size_t>(act[a]);
        ++queries[i];
        if (cand_margin[a] < best_margin[i]) {
          best_margin[i] = cand_margin[a];
          copy_row(cand, static_cast<std::int64_t>(a), best, act[a]);
          if (loss_trace) (*loss_trace)[static_cast<std::size_t>(b) + i].push_back(static_cast<float>(cand_margin[a]));
        }
      }
    }
    for (std::int64_t i = 0; i < m; ++i) {
      copy_row(best, i, result.adversarial, b + i);
      result.queries = std::max(result.queries, queries[static_cast<std::size_t>(i)]);
    }
  }
  verify(model, labels, false, cfg.batch_size, result);
  return result;
}

float linf_distance(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

std::int64_t constraint_violations(const Tensor& x, const Tensor& adv, float epsilon, float tol) {
  if (x.shape() != adv.shape()) throw std::invalid_argument("constraint_violations: shape mismatch");
  std::int64_t bad = 0;
  for (std::int64_t k = 0; k < x.numel(); ++k) {
    const float a = adv[k];
    if (!(std::fabs(a - x[k]) <= epsilon + tol) || !(a >= 0.0f && a <= 1.0f)) ++bad;
  }
  return bad;
}

EnsembleResult ensemble_eval(const Classifier& model, const Tensor& x, std::span<const int> labels,
                             const EnsembleConfig& cfg) {
  check_inputs(model, x, labels, "ensemble_eval");
  const auto n = x.size(0);
  const int c = model.num_classes();
  EnsembleResult out;
  out.adversarial = x;
  Tensor clean_logits({0, c});
  {
    std::vector<Tensor> parts;
    for (std::int64_t b = 0; b < n; b += cfg.batch_size) parts.push_back(model.logits(x.slice_rows(b, std::min(n, b + cfg.batch_size))));
    if (!parts.empty()) clean_logits = concat_rows(parts);
  }
  out.predictions = argmax_rows(clean_logits);
  out.clean_balacc = balanced_accuracy(labels, out.predictions, c);
  out.robust.assign(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) out.robust[static_cast<std::size_t>(i)] = out.predictions[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)];
  const std::vector<std::uint8_t> clean_correct = out.robust;

  AttackConfig base;
  base.epsilon = cfg.epsilon;
  base.steps = cfg.pgd_steps;
  base.restarts = cfg.restarts;
  base.batch_size = cfg.batch_size;

  // Each attack maps (subset rows) -> per-row success and adversarial rows.
  struct Outcome {
    std::vector<std::uint8_t> success;
    std::vector<int> predictions;
    Tensor adversarial;
  };
  using Runner = std::function<Outcome(const std::vector<std::int64_t>&)>;
  auto gather_labels = [&](const std::vector<std::int64_t>& rows) {
    std::vector<int> y(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) y[i] = labels[static_cast<std::size_t>(rows[i])];
    return y;
  };
  auto pgd_runner = [&](AttackLoss loss, const char* tag) -> Runner {
    return [&, loss, tag](const std::vector<std::int64_t>& rows) {
      AttackConfig a = base;
      a.loss = loss;
      a.seed = derive_seed(cfg.seed, tag);
      auto r = pgd(model, x.gather_rows(rows), gather_labels(rows), a);
      return Outcome{r.success, r.predictions, std::move(r.adversarial)};
    };
  };
  Runner targeted = [&](const std::vector<std::int64_t>& rows) {
    const auto y = gather_labels(rows);
    const Tensor xs = x.gather_rows(rows);
    Outcome o{std::vector<std::uint8_t>(rows.size(), 0), std::vector<int>(rows.size()), xs};
    for (std::size_t i = 0; i < rows.size(); ++i) o.predictions[i] = y[i];
    const int k_max = std::min(c - 1, cfg.max_targets);
    for (int k = 1; k <= k_max; ++k) {
      std::vector<std::int64_t> todo;
      std::vector<int> tgt;
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (o.success[i]) continue;
        // k-th highest clean logit among the wrong classes
        std::vector<int> order(static_cast<std::size_t>(c));
        std::iota(order.begin(), order.end(), 0);
        const float* z = clean_logits.ptr() + rows[i] * c;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b2) { return z[a] > z[b2]; });
        order.erase(std::remove(order.begin(), order.end(), y[i]), order.end());
        todo.push_back(static_cast<std::int64_t>(i));
        tgt.push_back(order[static_cast<std::size_t>(k - 1)]);
      }
      if (todo.empty()) break;
      AttackConfig a = base;
      a.restarts = 1;
      a.targeted = true;
      a.loss = AttackLoss::ce;
      a.seed = derive_seed(cfg.seed, "pgd-targeted", static_cast<std::uint64_t>(k));
      const auto r = pgd_targeted(model, xs.gather_rows(todo), tgt, a);
      for (std::size_t j = 0; j < todo.size(); ++j) {
        if (!r.success[j]) continue;
        const auto i = static_cast<std::size_t>(todo[j]);
        o.success[i] = 1;
        o.predictions[i] = r.predictions[j];
        copy_row(r.adversarial, static_cast<std::int64_t>(j), o.adversarial, todo[j]);
      }
    }
    return o;
  };
  Runner square = [&](const std::vector<std::int64_t>& rows) {
    AttackConfig a = base;
    a.steps = cfg.square_queries;
    a.restarts = 1;
    a.seed = derive_seed(cfg.seed, "square");
    auto r = square_attack(model, x.gather_rows(rows), gather_labels(rows), a);
    return Outcome{r.success, r.predictions, std::move(r.adversarial)};
  };
  const std::vector<std::pair<std::string, Runner>> attacks = {
      {"pgd-ce", pgd_runner(AttackLoss::ce, "pgd-ce")},
      {"pgd-margin", pgd_runner(AttackLoss::margin, "pgd-margin")},
      {"pgd-targeted", targeted},
      {"square", square},
  };

  auto rows_where = [&](const std::vector<std::uint8_t>& mask) {
    std::vector<std::int64_t> rows;
    for (std::int64_t i = 0; i < n; ++i) {
      if (mask[static_cast<std::size_t>(i)]) rows.push_back(i);
    }
    return rows;
  };
  for (const auto& [name, run] : attacks) {
    AttackBreakdown bd;
    bd.name = name;
    const auto rows = rows_where(out.robust);
    if (!rows.empty()) {
      const Outcome o = run(rows);
      for (std::size_t j = 0; j < rows.size(); ++j) {
        if (!o.success[j]) continue;
        const auto i = static_cast<std::size_t>(rows[j]);
        out.robust[i] = 0;
        out.predictions[i] = o.predictions[j];
        copy_row(o.adversarial, static_cast<std::int64_t>(j), out.adversarial, rows[j]);
        ++bd.new_successes;
      }
    }
    if (cfg.standalone) {
      const auto all = rows_where(clean_correct);
      std::vector<int> pred = argmax_rows(clean_logits);
      if (!all.empty()) {
        const Outcome o = run(all);
        for (std::size_t j = 0; j < all.size(); ++j) {
          if (o.success[j]) pred[static_cast<std::size_t>(all[j])] = o.predictions[j];
        }
      }
      bd.standalone_robust_balacc = balanced_accuracy(labels, pred, c);
    }
    spdlog::debug("ensemble: {} removed {} samples", name, bd.new_successes);
    out.breakdown.push_back(bd);
  }
  out.robust_balacc = balanced_accuracy(labels, out.predictions, c);
  out.robust_accuracy = n == 0 ? 0.0
                               : static_cast<double>(std::count(out.robust.begin(), out.robust.end(), 1)) / static_cast<double>(n);
  return out;
}

}  // namespace nrf
