#pragma once
// Standard and TRADES training loops.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nrf/dataset.hpp"
#include "nrf/model.hpp"
#include "nrf/optim.hpp"
#include "nrf/rng.hpp"

namespace nrf {

enum class InnerLoss { kl, ce };

std::string inner_loss_name(InnerLoss loss);
InnerLoss parse_inner_loss(const std::string& name);

struct TradesConfig {
  float beta = 5.0f;
  int inner_steps = 10;
  float epsilon = 4.0f / 255.0f;
  float inner_step_size = 0.0f;  // 0 selects 2.5 * epsilon / inner_steps
  InnerLoss inner_loss = InnerLoss::kl;
  float init_noise = 0.001f;     // std of the Gaussian start around x

  void validate() const;
  float step_size() const {
    return inner_step_size > 0.0f ? inner_step_size : 2.5f * epsilon / static_cast<float>(inner_steps);
  }
};

struct TradesResult {
  double loss = 0.0;  // ce + beta * kl
  double ce = 0.0;
  double kl = 0.0;
  Tensor x_adv;
  std::vector<Tensor> param_grads;
};

// Inner maximisation in eval mode (running statistics), then clean and
// adversarial forwards in train mode. Only the clean forward may update the
// running statistics. `rng` drives the start noise only.
TradesResult trades_loss(Model& model, const Tensor& x, std::span<const int> labels, const TradesConfig& cfg,
                         float label_smoothing, Rng& rng, bool update_running_stats = true);

// Inner maximisation alone: returns x + delta with ||delta||_inf <= epsilon.
Tensor trades_adversary(const Model& model, const Tensor& x, std::span<const int> labels, const TradesConfig& cfg,
                        Rng& rng);

struct TrainConfig {
  float lr = 0.1f;
  int batch_size = 128;
  int max_epochs = 200;
  float label_smoothing = 0.1f;
  bool augmentation = true;
  std::uint64_t seed = 0;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  float ema_decay = 0.995f;
  int patience = 20;
  double min_delta = 1e-4;
  // Adversarial validation (always for TRADES; optional for standard runs).
  float val_epsilon = 4.0f / 255.0f;
  int val_attack_steps = 10;
  std::int64_t val_max_samples = 0;  // 0 = whole split
  bool adv_val_for_standard = false;
  // Keep the final EMA weights and never stop early. Used where validation
  // labels must not steer the result (the permuted-label control).
  bool select_last = false;
  std::string epoch_log_csv;  // empty = no file

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double clean_val_balacc = 0.0;
  double adv_val_balacc = -1.0;  // -1 when not evaluated
  double wall_time = 0.0;        // seconds since training start
};

struct TrainResult {
  Model model;  // EMA weights at the selected epoch
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_metric = 0.0;
  std::string selection_metric;  // "clean_val_balacc" or "adv_val_balacc"
  bool stopped_early = false;
  std::int64_t total_steps = 0;
};

// Random crop from a 4-pixel zero pad plus horizontal flip, per sample.
Tensor augment_batch(const Tensor& x, Rng& rng);

TrainResult train_standard(const ImageDataset& train, const ImageDataset& val, const ModelSpec& spec,
                           const TrainConfig& cfg);
TrainResult train_trades(const ImageDataset& train, const ImageDataset& val, const ModelSpec& spec,
                         const TrainConfig& cfg, const TradesConfig& trades);

// Balanced accuracy under 10-step (cfg) PGD-CE, eval mode.
double adversarial_balacc(const Model& model, const ImageDataset& data, float epsilon, int steps, std::uint64_t seed,
                          std::int64_t max_samples = 0);
double clean_balacc(const Model& model, const ImageDataset& data);

void write_epoch_csv(const std::string& path, const std::vector<EpochRecord>& epochs);

}  // namespace nrf
