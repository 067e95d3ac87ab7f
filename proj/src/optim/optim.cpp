#include "nrf/optim.hpp"

#include <cmath>
#include <numbers>

#include <spdlog/spdlog.h>

namespace nrf {

float cosine_lr(std::int64_t step, std::int64_t total_steps, float base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("cosine_lr: total_steps must be > 0");
  if (step < 0) throw std::invalid_argument("cosine_lr: step must be >= 0");
  if (step > total_steps) {
    spdlog::warn("cosine_lr: step {} beyond total_steps {}; learning rate clamped to 0", step, total_steps);
    return 0.0f;
  }
  if (step == total_steps) return 0.0f;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<float>(base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

OptimState OptimState::for_params(const ParamSet& params, float base_lr, float momentum, std::int64_t total_steps) {
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw std::invalid_argument("momentum must be in [0,1)");
  OptimState s;
  s.velocity = params.zeros_like();
  s.base_lr = base_lr;
  s.momentum = momentum;
  s.total_steps = total_steps;
  return s;
}

void sgd_nesterov_step(ParamSet& params, const std::vector<Tensor>& grads, OptimState& state, float lr) {
  if (grads.size() != static_cast<std::size_t>(params.size()) || !state.velocity.same_layout(params)) {
    throw std::invalid_argument("sgd_nesterov_step: gradient/velocity layout does not match parameters");
  }
  for (int i = 0; i < params.size(); ++i) {
    const Tensor& g = grads[static_cast<std::size_t>(i)];
    if (g.shape() != params[i].shape()) {
      throw std::invalid_argument("sgd_nesterov_step: gradient shape mismatch for '" + params.name(i) + "'");
    }
    if (!g.all_finite()) {
      spdlog::warn("non-finite gradient in '{}'; step skipped", params.name(i));
      throw NonFiniteGradient(params.name(i));
    }
  }
  const float mu = state.momentum;
  for (int i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto v = state.velocity[i].data();
    auto g = grads[static_cast<std::size_t>(i)].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mu * v[k] - lr * g[k];
      p[k] += mu * v[k] - lr * g[k];
    }
  }
  ++state.step;
}

EmaState EmaState::from(const ParamSet& params, const ParamSet& buffers, float decay) {
  if (!(decay >= 0.0f && decay < 1.0f)) throw std::invalid_argument("EMA decay must be in [0,1)");
  return EmaState{params, buffers, decay, 0};
}

namespace {
void blend(ParamSet& shadow, const ParamSet& live, float decay) {
  if (!shadow.same_layout(live)) throw std::invalid_argument("ema_update: shadow layout does not match");
  for (int i = 0; i < live.size(); ++i) {
    auto s = shadow[i].data();
    auto p = live[i].data();
    for (std::size_t k = 0; k < s.size(); ++k) s[k] = decay * s[k] + (1.0f - decay) * p[k];
  }
}
}  // namespace

void ema_update(EmaState& ema, const ParamSet& params, const ParamSet& buffers, float decay) {
  if (!(decay >= 0.0f && decay < 1.0f)) throw std::invalid_argument("EMA decay must be in [0,1)");
  blend(ema.shadow, params, decay);
  blend(ema.shadow_buffers, buffers, decay);
  ++ema.updates;
}

float ema_warmup_decay(float decay, std::int64_t t) {
  return std::min(decay, static_cast<float>(1.0 + static_cast<double>(t)) / static_cast<float>(10.0 + static_cast<double>(t)));
}

StopDecision early_stop_check(EarlyStopState& state, double metric, int epoch) {
  state.improved = metric > state.best_metric + state.min_delta;
  if (state.improved) {
    state.best_metric = metric;
    state.best_epoch = epoch;
    state.epochs_since_improve = 0;
  } else {
    ++state.epochs_since_improve;
  }
  return state.epochs_since_improve > state.patience ? StopDecision::stop : StopDecision::continue_training;
}

}  // namespace nrf
