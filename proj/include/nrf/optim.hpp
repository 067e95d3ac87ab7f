#pragma once
// SGD with Nesterov momentum, cosine learning-rate schedule, weight EMA and
// early stopping.

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "nrf/graph.hpp"

namespace nrf {

// base_lr * 0.5 * (1 + cos(pi * step / total_steps)). step > total_steps
// clamps to 0 with a warning.
float cosine_lr(std::int64_t step, std::int64_t total_steps, float base_lr);

struct OptimState {
  ParamSet velocity;
  std::int64_t step = 0;
  float base_lr = 0.1f;
  float momentum = 0.9f;
  std::int64_t total_steps = 1;

  static OptimState for_params(const ParamSet& params, float base_lr, float momentum, std::int64_t total_steps);
};

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient in parameter '" + param + "'"), param_name(param) {}
  std::string param_name;
};

// v <- mu*v - lr*g;  p <- p + mu*v - lr*g.
// All gradients are checked before anything is written; a non-finite entry
// throws NonFiniteGradient and leaves params and state untouched.
void sgd_nesterov_step(ParamSet& params, const std::vector<Tensor>& grads, OptimState& state, float lr);

struct EmaState {
  ParamSet shadow;          // mirrors the parameters
  ParamSet shadow_buffers;  // mirrors batch-norm running statistics
  float decay = 0.995f;
  std::int64_t updates = 0;

  static EmaState from(const ParamSet& params, const ParamSet& buffers, float decay);
};

// shadow <- decay * shadow + (1 - decay) * params, for parameters and buffers.
void ema_update(EmaState& ema, const ParamSet& params, const ParamSet& buffers, float decay);
inline void ema_update(EmaState& ema, const ParamSet& params, const ParamSet& buffers) {
  ema_update(ema, params, buffers, ema.decay);
}
// Decay used by the trainers at update t (0-based): min(decay, (1+t)/(10+t)).
float ema_warmup_decay(float decay, std::int64_t t);

enum class StopDecision { continue_training, stop };

struct EarlyStopState {
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_since_improve = 0;
  int patience = 20;
  double min_delta = 1e-4;
  bool improved = false;  // set by the last check; the caller snapshots on true
};

// metric > best + min_delta resets the counter (improved = true); otherwise the
// counter increments. Stops once the counter exceeds patience.
StopDecision early_stop_check(EarlyStopState& state, double metric, int epoch);

}  // namespace nrf
