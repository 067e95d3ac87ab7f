#include "nrf/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "nrf/archive.hpp"
#include "nrf/metrics.hpp"
#include "nrf/ops.hpp"

namespace nrf {

Tensor saliency(const Classifier& model, const Tensor& x, bool normalize, std::vector<int>* predicted) {
  if (x.dim() != 4) throw ShapeError("saliency: expected [N,C,H,W], got " + shape_str(x.shape()));
  std::vector<int> pred;
  const Tensor g = model.input_gradient(x, [&](const Tensor& z) {
    pred = argmax_rows(z);
    Tensor seed(z.shape(), 0.0f);
    for (std::int64_t i = 0; i < z.size(0); ++i) seed[i * z.size(1) + pred[static_cast<std::size_t>(i)]] = 1.0f;
    return seed;
  });
  const auto n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  Tensor maps({n, 1, x.size(2), x.size(3)}, 0.0f);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t k = 0; k < hw; ++k) {
        float& m = maps[i * hw + k];
        m = std::max(m, std::fabs(g[(i * c + ch) * hw + k]));
      }
  if (predicted) *predicted = std::move(pred);
  return normalize ? normalize_maps(maps) : maps;
}

Tensor normalize_maps(const Tensor& maps) {
  Tensor out = maps;
  const auto n = maps.size(0), per = maps.row_numel();
  for (std::int64_t i = 0; i < n; ++i) {
    float* p = out.ptr() + i * per;
    const auto [lo, hi] = std::minmax_element(p, p + per);
    const float mn = *lo, mx = *hi;
    for (std::int64_t k = 0; k < per; ++k) {
      if (mx > mn) p[k] = (p[k] - mn) / (mx - mn);
      else p[k] = mx > 0.0f ? 1.0f : 0.0f;
    }
  }
  return out;
}

std::vector<double> map_rank_correlation(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("map_rank_correlation: shape mismatch");
  const auto n = a.size(0), per = a.row_numel();
  std::vector<double> out;
  std::vector<double> va(static_cast<std::size_t>(per)), vb(static_cast<std::size_t>(per));
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t k = 0; k < per; ++k) {
      va[static_cast<std::size_t>(k)] = a[i * per + k];
      vb[static_cast<std::size_t>(k)] = b[i * per + k];
    }
    out.push_back(spearman(va, vb));
  }
  return out;
}

double mean_finite(const std::vector<double>& v) {
  double s = 0.0;
  std::int64_t k = 0;
  for (double x : v)
    if (std::isfinite(x)) s += x, ++k;
  return k ? s / static_cast<double>(k) : NAN;
}

void write_pgm_grid(const std::string& path, const std::vector<std::vector<Tensor>>& rows, int gap) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("write_pgm_grid: nothing to draw");
  const Tensor& first = rows[0][0];
  if (first.dim() < 2) throw ShapeError("write_pgm_grid: panels need at least two axes");
  const auto ph = first.size(static_cast<int>(first.dim()) - 2), pw = first.size(static_cast<int>(first.dim()) - 1);
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const auto W = static_cast<std::int64_t>(cols) * (pw + gap) - gap, H = static_cast<std::int64_t>(rows.size()) * (ph + gap) - gap;
  std::vector<std::uint8_t> img(static_cast<std::size_t>(W * H), 255);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      const Tensor& t = rows[r][c];
      if (t.numel() != ph * pw) throw ShapeError("write_pgm_grid: panels must all be " + std::to_string(ph) + "x" + std::to_string(pw));
      for (std::int64_t y = 0; y < ph; ++y)
        for (std::int64_t x = 0; x < pw; ++x) {
          const float v = std::clamp(t[y * pw + x], 0.0f, 1.0f);
          img[static_cast<std::size_t>((static_cast<std::int64_t>(r) * (ph + gap) + y) * W + static_cast<std::int64_t>(c) * (pw + gap) + x)] =
              static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
    }
  const std::string header = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), img.begin(), img.end());
  write_file(path, bytes);
}

std::string eval_mode_name(EvalMode m) {
  switch (m) {
    case EvalMode::clean: return "clean";
    case EvalMode::corrupted: return "corrupted";
    case EvalMode::adversarial: return "adversarial";
  }
  return "?";
}

EvalMode parse_eval_mode(const std::string& s) {
  if (s == "clean") return EvalMode::clean;
  if (s == "corrupted") return EvalMode::corrupted;
  if (s == "adversarial") return EvalMode::adversarial;
  throw std::invalid_argument("unknown evaluation mode '" + s + "' (expected clean, corrupted or adversarial)");
}

nlohmann::json EvalSection::to_json() const {
  return {{"mode", eval_mode_name(mode)},
          {"balanced_accuracy", balanced_accuracy},
          {"auc", auc},
          {"samples", samples},
          {"detail", detail}};
}

EvalSection evaluate_model(const Model& model, const ImageDataset& split, EvalMode mode, const EvalOptions& opts) {
  const ImageDataset data = opts.max_samples > 0 && opts.max_samples < split.size() ? split.take(opts.max_samples) : split;
  EvalSection s;
  s.mode = mode;
  s.samples = data.size();
  switch (mode) {
    case EvalMode::clean: {
      const auto m = score_logits(predict_logits(model, data.images), data.labels, data.num_classes);
      s.balanced_accuracy = m.balanced_accuracy;
      s.auc = m.auc;
      break;
    }
    case EvalMode::corrupted: {
      const auto set = opts.corruptions.empty() ? benchmark_set(opts.corruption_seed) : opts.corruptions;
      const auto rep = corrupted_eval(model, data, set, opts.workers);
      s.balanced_accuracy = rep.ood_balanced_accuracy;
      s.auc = rep.ood_auc;
      auto cells = nlohmann::json::array();
      for (const auto& c : rep.cells) {
        cells.push_back({{"kind", corruption_name(c.spec.kind)},
                         {"severity", c.spec.severity},
                         {"parameter", c.parameter},
                         {"seed", c.spec.seed},
                         {"balanced_accuracy", c.metrics.balanced_accuracy},
                         {"auc", c.metrics.auc}});
      }
      s.detail["cells"] = cells;
      break;
    }
    case EvalMode::adversarial: {
      const NetworkClassifier clf(model);
      const auto r = ensemble_eval(clf, data.images, data.labels, opts.ensemble);
      s.balanced_accuracy = r.robust_balacc;
      s.auc = macro_ovr_auc(ops::softmax(predict_logits(model, r.adversarial)), data.labels);
      s.detail = {{"attack", r.label},
                  {"epsilon", opts.ensemble.epsilon},
                  {"pgd_steps", opts.ensemble.pgd_steps},
                  {"restarts", opts.ensemble.restarts},
                  {"square_queries", opts.ensemble.square_queries},
                  {"clean_balanced_accuracy", r.clean_balacc},
                  {"robust_accuracy", r.robust_accuracy},
                  {"max_linf", linf_distance(data.images, r.adversarial)}};
      for (const auto& b : r.breakdown) {
        s.detail["breakdown"].push_back({{"attack", b.name},
                                         {"new_successes", b.new_successes},
                                         {"standalone_robust_balanced_accuracy", b.standalone_robust_balacc}});
      }
      break;
    }
  }
  return s;
}

}  // namespace nrf
