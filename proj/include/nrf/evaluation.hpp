#pragma once
// Saliency maps and per-mode model evaluation (clean, corrupted, adversarial).

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nrf/attacks.hpp"
#include "nrf/corruptions.hpp"
#include "nrf/dataset.hpp"
#include "nrf/model.hpp"

namespace nrf {

// Gradient of the predicted-class logit w.r.t. the input, aggregated over
// channels by max |.|: [N,1,H,W]. `predicted` receives the argmax classes.
Tensor saliency(const Classifier& model, const Tensor& x, bool normalize, std::vector<int>* predicted = nullptr);

// Per-sample min-max scaling to [0,1]. A map that is constant and positive
// becomes all ones; an all-zero map stays all zeros (never NaN).
Tensor normalize_maps(const Tensor& maps);

// Spearman correlation between corresponding maps, one value per sample
// (NaN where a map is constant).
std::vector<double> map_rank_correlation(const Tensor& a, const Tensor& b);
double mean_finite(const std::vector<double>& v);

// Binary PGM (P5) grid: rows of equally sized [H,W] panels in [0,1].
void write_pgm_grid(const std::string& path, const std::vector<std::vector<Tensor>>& rows, int gap = 1);

enum class EvalMode { clean, corrupted, adversarial };
std::string eval_mode_name(EvalMode m);
EvalMode parse_eval_mode(const std::string& s);

struct EvalOptions {
  std::vector<CorruptionSpec> corruptions;  // corrupted mode; empty = full benchmark
  std::uint64_t corruption_seed = 0;
  EnsembleConfig ensemble;                  // adversarial mode
  std::int64_t max_samples = 0;             // 0 = whole split (first rows otherwise)
  int workers = 1;
};

struct EvalSection {
  EvalMode mode = EvalMode::clean;
  double balanced_accuracy = 0.0;
  double auc = 0.0;
  std::int64_t samples = 0;
  nlohmann::json detail = nlohmann::json::object();

  nlohmann::json to_json() const;
};

EvalSection evaluate_model(const Model& model, const ImageDataset& split, EvalMode mode, const EvalOptions& opts = {});

}  // namespace nrf
