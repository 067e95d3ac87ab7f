#pragma once
// L-infinity adversarial example generation against a Classifier in eval mode.
//
// Every returned image lies in the intersection of the epsilon ball around
// its source and the [0,1] box.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nrf/model.hpp"

namespace nrf {

enum class AttackLoss { ce, margin, kl };

std::string attack_loss_name(AttackLoss loss);
AttackLoss parse_attack_loss(const std::string& name);

struct AttackConfig {
  float epsilon = 4.0f / 255.0f;
  int steps = 10;
  float step_size = 0.0f;  // 0 selects 2.5 * epsilon / steps
  int restarts = 1;
  bool targeted = false;
  AttackLoss loss = AttackLoss::ce;
  std::uint64_t seed = 0;
  bool random_start = true;
  std::int64_t batch_size = 256;

  // Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  float alpha() const { return step_size > 0.0f ? step_size : 2.5f * epsilon / static_cast<float>(steps); }
};

struct AttackResult {
  Tensor adversarial;
  std::vector<std::uint8_t> success;  // from a fresh forward pass on `adversarial`
  std::vector<int> predictions;       // argmax on `adversarial`
  std::int64_t queries = 0;           // forward evaluations per sample (square attack)
  int nonfinite_restarts = 0;

  double success_rate() const;
};

// Untargeted PGD: ascend the loss of the true label. Restarts are run only for
// samples not yet misclassified. A sample's returned image is its latest
// misclassified iterate if any, otherwise the final iterate of the restart
// with the largest final loss.
AttackResult pgd(const Classifier& model, const Tensor& x, std::span<const int> labels, const AttackConfig& cfg);

// Targeted PGD: descend the loss toward `targets`; success = argmax == target.
AttackResult pgd_targeted(const Classifier& model, const Tensor& x, std::span<const int> targets,
                          const AttackConfig& cfg);

// Gradient-free square search (forward passes only). cfg.steps is the query
// budget per sample; cfg.restarts and step size are unused. `loss_trace`, if
// given, receives each sample's accepted margin (z_true - max other) values.
AttackResult square_attack(const Classifier& model, const Tensor& x, std::span<const int> labels,
                           const AttackConfig& cfg, std::vector<std::vector<float>>* loss_trace = nullptr);

// Square-size schedule (fraction of pixels) at iteration `it` of `budget`.
float square_p_schedule(float p_init, std::int64_t it, std::int64_t budget);

struct EnsembleConfig {
  float epsilon = 4.0f / 255.0f;
  int pgd_steps = 100;
  int restarts = 5;
  int max_targets = 9;
  int square_queries = 5000;
  std::uint64_t seed = 0;
  std::int64_t batch_size = 256;
  // Also run every attack on all clean-correct samples to report standalone
  // robust accuracy per attack.
  bool standalone = false;
};

struct AttackBreakdown {
  std::string name;
  std::int64_t new_successes = 0;           // sequential ensemble
  double standalone_robust_balacc = -1.0;   // -1 when not computed
};

struct EnsembleResult {
  double clean_balacc = 0.0;
  double robust_balacc = 0.0;
  double robust_accuracy = 0.0;  // plain fraction of samples surviving
  std::vector<std::uint8_t> robust;
  std::vector<int> predictions;  // worst-case prediction per sample
  Tensor adversarial;            // worst-case input per sample (clean input if none found)
  std::vector<AttackBreakdown> breakdown;
  std::string label = "ensemble{pgd-ce,pgd-margin,pgd-targeted,square} (AutoAttack stand-in)";
};

// A sample is robust only if it is classified correctly and survives every
// attack. Attacks run in sequence, each only on the current survivors.
EnsembleResult ensemble_eval(const Classifier& model, const Tensor& x, std::span<const int> labels,
                             const EnsembleConfig& cfg);

// ||a - b||_inf.
float linf_distance(const Tensor& a, const Tensor& b);
// Count of entries violating the epsilon ball (tolerance tol) or the [0,1] box.
std::int64_t constraint_violations(const Tensor& x, const Tensor& adv, float epsilon, float tol = 1e-6f);

}  // namespace nrf
