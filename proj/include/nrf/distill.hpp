#pragma once
// Nonrobust-feature dataset: correctly classified training images pushed by
// targeted PGD toward a randomly drawn class and relabelled with it.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrf/dataset.hpp"
#include "nrf/model.hpp"

namespace nrf {

struct DistillConfig {
  float epsilon = 4.0f / 255.0f;
  int steps = 100;
  float step_size = 0.0f;  // 0 selects 2.5 * epsilon / steps
  int restarts = 1;
  std::uint64_t seed = 0;
  std::int64_t batch_size = 256;
  std::string checkpoint_hash;  // SHA-256 of the base model archive, recorded as provenance

  void validate() const;
  nlohmann::json to_json() const;
};

struct ClassRetention {
  std::int64_t eligible = 0;  // correctly classified sources of this class
  std::int64_t kept = 0;
};

struct DistilledDataset {
  ImageDataset data;                        // x_hat with target labels t
  std::vector<std::int64_t> source_indices;  // row in the source split, ascending
  std::vector<int> original_labels;
  std::vector<std::uint8_t> success;  // fresh-forward f(x_hat) == t
  std::int64_t source_size = 0;
  std::int64_t eligible = 0;
  std::vector<ClassRetention> per_class;  // indexed by original label
  nlohmann::json config;

  double retention_rate() const { return eligible ? static_cast<double>(data.size()) / static_cast<double>(eligible) : 0.0; }
};

class DistillError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Target for source row i: derive_seed(seed, "target", i) mod C, so it does
// not depend on which other rows are eligible.
int distill_target(std::uint64_t seed, std::int64_t source_index, int num_classes);

// Throws DistillError if nothing is eligible or nothing survives; warns (with a
// per-class breakdown) when retention is below 50%.
DistilledDataset build_nonrobust_dataset(const Model& base, const ImageDataset& train, const DistillConfig& cfg);

struct DistillAudit {
  std::int64_t samples = 0;
  double mean_linf = 0.0;
  double max_linf = 0.0;
  std::int64_t box_or_ball_violations = 0;
  std::vector<std::int64_t> target_histogram;
  double chi2 = 0.0;
  double chi2_p = 1.0;  // uniformity of target_histogram
  double relabeled_fraction = 0.0;  // t != y
  double expected_relabeled_fraction = 0.0;  // (C-1)/C
  std::int64_t reverified = 0;  // success flags confirmed by a fresh forward pass
  bool ok = false;  // no violations and every flag reverified

  nlohmann::json to_json() const;
};

// Chi-squared uniformity test of counts against equal expected frequencies.
double chi2_uniform_p(const std::vector<std::int64_t>& counts, double* statistic = nullptr);

DistillAudit audit_distilled(const DistilledDataset& d, const ImageDataset& source, const Model& base, float epsilon);

// Same images with the targets randomly permuted (the multiset of targets is
// kept) and balanced within every (original class, target) cell: the leakage
// control.
ImageDataset permuted_control(const DistilledDataset& d, std::uint64_t seed);

void save_distilled(const std::string& path, const DistilledDataset& d, const ImageDataset* val = nullptr);
// Loads the distilled train split (and the inherited val split if stored).
DistilledDataset load_distilled(const std::string& path, ImageDataset* val = nullptr);

}  // namespace nrf
