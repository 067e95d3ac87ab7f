#include "nrf/distill.hpp"

#include <algorithm>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>
#include <spdlog/spdlog.h>

#include "nrf/archive.hpp"
#include "nrf/attacks.hpp"
#include "nrf/datasets.hpp"
#include "nrf/rng.hpp"

namespace nrf {

void DistillConfig::validate() const {
  if (!(epsilon > 0.0f)) throw std::invalid_argument("distill: epsilon must be > 0");
  if (steps < 1) throw std::invalid_argument("distill: steps must be >= 1");
  if (restarts < 1) throw std::invalid_argument("distill: restarts must be >= 1");
  if (step_size < 0.0f) throw std::invalid_argument("distill: step_size must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("distill: batch_size must be >= 1");
}

nlohmann::json DistillConfig::to_json() const {
  return {{"epsilon", epsilon}, {"steps", steps},           {"step_size", step_size},
          {"restarts", restarts}, {"seed", seed},           {"batch_size", batch_size},
          {"checkpoint_hash", checkpoint_hash}};
}

int distill_target(std::uint64_t seed, std::int64_t source_index, int num_classes) {
  return static_cast<int>(derive_seed(seed, "target", static_cast<std::uint64_t>(source_index)) %
                          static_cast<std::uint64_t>(num_classes));
}

DistilledDataset build_nonrobust_dataset(const Model& base, const ImageDataset& train, const DistillConfig& cfg) {
  cfg.validate();
  const int C = train.num_classes;
  DistilledDataset out;
  out.source_size = train.size();
  out.per_class.assign(static_cast<std::size_t>(C), {});
  out.config = cfg.to_json();

  const auto preds = argmax_rows(predict_logits(base, train.images, cfg.batch_size));
  std::vector<std::int64_t> rows;
  for (std::int64_t i = 0; i < train.size(); ++i) {
    if (preds[static_cast<std::size_t>(i)] == train.labels[static_cast<std::size_t>(i)]) {
      rows.push_back(i);
      ++out.per_class[static_cast<std::size_t>(train.labels[static_cast<std::size_t>(i)])].eligible;
    }
  }
  out.eligible = static_cast<std::int64_t>(rows.size());
  if (rows.empty()) {
    throw DistillError("distill: the base model classifies no training sample correctly; nothing to distill");
  }

  const ImageDataset src = train.subset(rows);
  std::vector<int> targets(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) targets[k] = distill_target(cfg.seed, rows[k], C);

  AttackConfig ac;
  ac.epsilon = cfg.epsilon;
  ac.steps = cfg.steps;
  ac.step_size = cfg.step_size;
  ac.restarts = cfg.restarts;
  ac.targeted = true;
  ac.seed = derive_seed(cfg.seed, "distill_pgd");
  ac.batch_size = cfg.batch_size;
  const NetworkClassifier clf(base);
  const AttackResult r = pgd_targeted(clf, src.images, targets, ac);

  std::vector<std::int64_t> kept;
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (!r.success[k]) continue;
    kept.push_back(static_cast<std::int64_t>(k));
    out.source_indices.push_back(rows[k]);
    out.original_labels.push_back(src.labels[k]);
    ++out.per_class[static_cast<std::size_t>(src.labels[k])].kept;
  }
  if (kept.empty()) throw DistillError("distill: no targeted attack succeeded; the distilled set would be empty");

  out.data.images = r.adversarial.gather_rows(kept);
  out.data.labels.reserve(kept.size());
  for (auto k : kept) out.data.labels.push_back(targets[static_cast<std::size_t>(k)]);
  out.data.split = "train";
  out.data.num_classes = C;
  out.data.provenance = train.provenance;
  out.data.provenance["distilled"] = "targeted pgd eps=" + std::to_string(cfg.epsilon) + " steps=" + std::to_string(cfg.steps);
  out.data.provenance["checkpoint_hash"] = cfg.checkpoint_hash;
  out.success.assign(kept.size(), 1);

  const double retention = out.retention_rate();
  spdlog::info("distill: {} of {} eligible samples kept ({:.1f}%), {} sources", out.data.size(), out.eligible,
               100.0 * retention, out.source_size);
  if (retention < 0.5) {
    spdlog::warn("distill: retention {:.1f}% is below 50%; the base model may be weak", 100.0 * retention);
    for (int c = 0; c < C; ++c) {
      const auto& pc = out.per_class[static_cast<std::size_t>(c)];
      spdlog::warn("  class {}: kept {} of {} eligible", c, pc.kept, pc.eligible);
    }
  }
  return out;
}

double chi2_uniform_p(const std::vector<std::int64_t>& counts, double* statistic) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (counts.size() < 2 || total <= 0.0) {
    if (statistic) *statistic = 0.0;
    return 1.0;
  }
  const double e = total / static_cast<double>(counts.size());
  double x2 = 0.0;
  for (auto c : counts) x2 += (static_cast<double>(c) - e) * (static_cast<double>(c) - e) / e;
  if (statistic) *statistic = x2;
  const boost::math::chi_squared dist(static_cast<double>(counts.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, x2));
}

nlohmann::json DistillAudit::to_json() const {
  return {{"samples", samples},
          {"mean_linf", mean_linf},
          {"max_linf", max_linf},
          {"violations", box_or_ball_violations},
          {"target_histogram", target_histogram},
          {"chi2", chi2},
          {"chi2_p", chi2_p},
          {"relabeled_fraction", relabeled_fraction},
          {"expected_relabeled_fraction", expected_relabeled_fraction},
          {"reverified", reverified},
          {"ok", ok}};
}

DistillAudit audit_distilled(const DistilledDataset& d, const ImageDataset& source, const Model& base, float epsilon) {
  DistillAudit a;
  const int C = d.data.num_classes;
  a.samples = d.data.size();
  a.target_histogram.assign(static_cast<std::size_t>(C), 0);
  if (a.samples == 0) return a;
  const Tensor x = source.images.gather_rows(d.source_indices);
  a.box_or_ball_violations = constraint_violations(x, d.data.images, epsilon);
  const auto per = x.row_numel();
  for (std::int64_t i = 0; i < a.samples; ++i) {
    float m = 0.0f;
    for (std::int64_t k = 0; k < per; ++k) m = std::max(m, std::fabs(d.data.images[i * per + k] - x[i * per + k]));
    a.mean_linf += m;
    a.max_linf = std::max(a.max_linf, static_cast<double>(m));
  }
  a.mean_linf /= static_cast<double>(a.samples);
  std::int64_t relabeled = 0;
  for (std::int64_t i = 0; i < a.samples; ++i) {
    const int t = d.data.labels[static_cast<std::size_t>(i)];
    ++a.target_histogram[static_cast<std::size_t>(t)];
    relabeled += t != d.original_labels[static_cast<std::size_t>(i)];
  }
  a.relabeled_fraction = static_cast<double>(relabeled) / static_cast<double>(a.samples);
  a.expected_relabeled_fraction = static_cast<double>(C - 1) / static_cast<double>(C);
  a.chi2_p = chi2_uniform_p(a.target_histogram, &a.chi2);
  const auto preds = argmax_rows(predict_logits(base, d.data.images));
  for (std::int64_t i = 0; i < a.samples; ++i) {
    a.reverified += d.success[static_cast<std::size_t>(i)] && preds[static_cast<std::size_t>(i)] == d.data.labels[static_cast<std::size_t>(i)];
  }
  a.ok = a.box_or_ball_violations == 0 && a.reverified == a.samples;
  return a;
}

ImageDataset permuted_control(const DistilledDataset& d, std::uint64_t seed) {
  // A permutation of the targets that spreads every target value evenly over
  // each (original class, target) cell. Control labels then carry no
  // information about either feature of their image, not even by sampling
  // accident; a plain shuffle leaves O(1/sqrt(n)) correlations that training
  // readily amplifies.
  ImageDataset p = d.data;
  const auto n = static_cast<std::size_t>(p.size());
  Rng rng(seed, "permuted_control");
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng.engine());
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
    return std::pair(d.original_labels[a], d.data.labels[a]) < std::pair(d.original_labels[b], d.data.labels[b]);
  });
  // Targets laid out so that every contiguous run holds each value in
  // proportion to its overall count (largest-remainder interleave).
  const int C = p.num_classes;
  std::vector<std::int64_t> left(static_cast<std::size_t>(C), 0);
  for (int t : d.data.labels) ++left[static_cast<std::size_t>(t)];
  const std::vector<std::int64_t> total = left;
  std::vector<int> order;
  order.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    int best = -1;
    double best_deficit = -1e300;
    for (int c = 0; c < C; ++c) {
      if (left[static_cast<std::size_t>(c)] == 0) continue;
      const double share = static_cast<double>(total[static_cast<std::size_t>(c)]) * static_cast<double>(k + 1) / static_cast<double>(n);
      const double deficit = share - static_cast<double>(total[static_cast<std::size_t>(c)] - left[static_cast<std::size_t>(c)]);
      if (deficit > best_deficit) best_deficit = deficit, best = c;
    }
    order.push_back(best);
    --left[static_cast<std::size_t>(best)];
  }
  for (std::size_t k = 0; k < n; ++k) p.labels[rows[k]] = order[k];
  p.provenance["control"] = "targets permuted, stratified by (original class, target)";
  return p;
}

void save_distilled(const std::string& path, const DistilledDataset& d, const ImageDataset* val) {
  std::map<std::string, NpyArray> extra;
  const auto n = d.data.size();
  extra["source_indices"] = NpyArray::from_i64({n}, d.source_indices);
  std::vector<std::int64_t> orig(d.original_labels.begin(), d.original_labels.end());
  extra["original_labels"] = NpyArray::from_i64({n}, orig);
  extra["success"] = NpyArray::from_u8({n}, d.success);
  nlohmann::json meta = {{"kind", "distilled"},
                         {"generator", d.config},
                         {"source_size", d.source_size},
                         {"eligible", d.eligible},
                         {"kept", n},
                         {"retention_rate", d.retention_rate()}};
  for (std::size_t c = 0; c < d.per_class.size(); ++c)
    meta["per_class"].push_back({{"class", c}, {"eligible", d.per_class[c].eligible}, {"kept", d.per_class[c].kept}});
  std::vector<const ImageDataset*> splits{&d.data};
  if (val) splits.push_back(val);
  save_dataset(path, splits, extra, meta.dump());
}

DistilledDataset load_distilled(const std::string& path, ImageDataset* val) {
  const auto zip = ZipArchive::open(path);
  DistilledDataset d;
  d.data = load_split(zip, "train");
  const auto si = read_npz_array(zip, "source_indices").to_i64();
  d.source_indices.assign(si.begin(), si.end());
  const auto ol = read_npz_array(zip, "original_labels").to_i64();
  d.original_labels.assign(ol.begin(), ol.end());
  d.success = read_npz_array(zip, "success").data;
  const auto mb = zip.read("metadata.json");
  const auto meta = nlohmann::json::parse(mb.begin(), mb.end());
  d.config = meta.value("generator", nlohmann::json::object());
  d.source_size = meta.value("source_size", std::int64_t{0});
  d.eligible = meta.value("eligible", std::int64_t{0});
  d.per_class.assign(static_cast<std::size_t>(d.data.num_classes), {});
  if (meta.contains("per_class")) {
    for (const auto& pc : meta["per_class"]) {
      auto& r = d.per_class.at(pc["class"].get<std::size_t>());
      r.eligible = pc["eligible"].get<std::int64_t>();
      r.kept = pc["kept"].get<std::int64_t>();
    }
  }
  if (val && zip.contains("val_images.npy")) *val = load_split(zip, "val", d.data.num_classes);
  return d;
}

}  // namespace nrf
