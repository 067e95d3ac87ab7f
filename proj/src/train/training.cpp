#include "nrf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "nrf/attacks.hpp"
#include "nrf/losses.hpp"
#include "nrf/metrics.hpp"
#include "nrf/ops.hpp"

namespace nrf {

std::string inner_loss_name(InnerLoss loss) { return loss == InnerLoss::kl ? "kl" : "ce"; }

InnerLoss parse_inner_loss(const std::string& name) {
  if (name == "kl") return InnerLoss::kl;
  if (name == "ce") return InnerLoss::ce;
  throw std::invalid_argument("unknown inner_loss '" + name + "' (expected kl or ce)");
}

void TradesConfig::validate() const {
  if (!(beta >= 0.0f) || !std::isfinite(beta)) throw std::invalid_argument("trades: beta must be >= 0");
  if (inner_steps < 1) throw std::invalid_argument("trades: inner_steps must be >= 1");
  if (!(epsilon >= 0.0f && epsilon < 1.0f)) throw std::invalid_argument("trades: epsilon must be in [0,1)");
  if (!(inner_step_size >= 0.0f)) throw std::invalid_argument("trades: inner_step_size must be >= 0");
  if (!(init_noise >= 0.0f)) throw std::invalid_argument("trades: init_noise must be >= 0");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0f)) throw std::invalid_argument("train: lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
  if (!(label_smoothing >= 0.0f && label_smoothing < 1.0f)) throw std::invalid_argument("train: label_smoothing must be in [0,1)");
  if (!(momentum >= 0.0f && momentum < 1.0f)) throw std::invalid_argument("train: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0f)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (!(ema_decay >= 0.0f && ema_decay < 1.0f)) throw std::invalid_argument("train: ema_decay must be in [0,1)");
  if (patience < 0) throw std::invalid_argument("train: patience must be >= 0");
  if (!(val_epsilon >= 0.0f && val_epsilon < 1.0f)) throw std::invalid_argument("train: val_epsilon must be in [0,1)");
  if (val_attack_steps < 1) throw std::invalid_argument("train: val_attack_steps must be >= 1");
}

Tensor trades_adversary(const Model& model, const Tensor& x, std::span<const int> labels, const TradesConfig& cfg,
                        Rng& rng) {
  cfg.validate();
  const float eps = cfg.epsilon;
  if (eps == 0.0f) return x;
  const float alpha = cfg.step_size();
  NetworkClassifier clf(model);
  const Tensor p_clean = ops::softmax(clf.logits(x));
  Tensor adv = x;
  auto project = [&] {
    for (std::int64_t k = 0; k < adv.numel(); ++k) {
      adv[k] = std::clamp(std::clamp(adv[k], x[k] - eps, x[k] + eps), 0.0f, 1.0f);
    }
  };
  for (auto& v : adv.data()) v += cfg.init_noise * rng.normal();
  project();
  const auto c = static_cast<std::int64_t>(model.spec.num_classes);
  for (int s = 0; s < cfg.inner_steps; ++s) {
    const Tensor g = clf.input_gradient(adv, [&](const Tensor& z) {
      Tensor seed = ops::softmax(z);
      for (std::int64_t i = 0; i < z.size(0); ++i) {
        if (cfg.inner_loss == InnerLoss::kl) {
          for (std::int64_t k = 0; k < c; ++k) seed[i * c + k] -= p_clean[i * c + k];
        } else {
          seed[i * c + labels[static_cast<std::size_t>(i)]] -= 1.0f;
        }
      }
      return seed;
    });
    for (std::int64_t k = 0; k < adv.numel(); ++k) {
      adv[k] += alpha * (g[k] > 0.0f ? 1.0f : (g[k] < 0.0f ? -1.0f : 0.0f));
    }
    project();
  }
  if (max_abs_diff(adv, x) > eps + 1e-6f) throw std::logic_error("trades: inner maximisation left the epsilon ball");
  return adv;
}

TradesResult trades_loss(Model& model, const Tensor& x, std::span<const int> labels, const TradesConfig& cfg,
                         float label_smoothing, Rng& rng, bool update_running_stats) {
  TradesResult out;
  out.x_adv = trades_adversary(model, x, labels, cfg, rng);
  Tape clean, adv;
  const Tensor zc = clean.forward(model.graph, model.params, model.buffers, x, ForwardOptions{Mode::train, update_running_stats});
  const Tensor za = adv.forward(model.graph, model.params, model.buffers, out.x_adv, ForwardOptions{Mode::train, false});
  LossGrad ce = ce_smoothed(zc, labels, label_smoothing);
  const KlGrad kl = kl_logits(zc, za);
  out.ce = ce.loss;
  out.kl = kl.loss;
  out.loss = ce.loss + static_cast<double>(cfg.beta) * kl.loss;
  Tensor seed = std::move(ce.grad);
  if (cfg.beta != 0.0f) {
    for (std::int64_t k = 0; k < seed.numel(); ++k) seed[k] += cfg.beta * kl.grad_p[k];
  }
  out.param_grads = clean.backward(seed, BackwardOptions{true, false}).params;
  if (cfg.beta != 0.0f) {
    Tensor seed_adv = kl.grad_q;
    for (auto& v : seed_adv.data()) v *= cfg.beta;
    const auto ga = adv.backward(seed_adv, BackwardOptions{true, false}).params;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      auto dst = out.param_grads[i].data();
      auto src = ga[i].data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  return out;
}

Tensor augment_batch(const Tensor& x, Rng& rng) {
  constexpr std::int64_t pad = 4;
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const auto dy = static_cast<std::int64_t>(rng.below(2 * pad + 1)) - pad;
    const auto dx = static_cast<std::int64_t>(rng.below(2 * pad + 1)) - pad;
    const bool flip = rng.coin();
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t r = 0; r < h; ++r)
        for (std::int64_t col = 0; col < w; ++col) {
          const auto sr = r + dy;
          const auto sc0 = col + dx;
          const auto sc = flip ? w - 1 - sc0 : sc0;
          if (sr < 0 || sr >= h || sc0 < 0 || sc0 >= w) continue;
          out.at(i, ch, r, col) = x.at(i, ch, sr, sc);
        }
  }
  return out;
}

double clean_balacc(const Model& model, const ImageDataset& data) {
  const auto pred = argmax_rows(predict_logits(model, data.images));
  return balanced_accuracy(data.labels, pred, data.num_classes);
}

double adversarial_balacc(const Model& model, const ImageDataset& data, float epsilon, int steps, std::uint64_t seed,
                          std::int64_t max_samples) {
  const ImageDataset d = max_samples > 0 && max_samples < data.size() ? data.take(max_samples) : data;
  AttackConfig a;
  a.epsilon = epsilon;
  a.steps = steps;
  a.restarts = 1;
  a.loss = AttackLoss::ce;
  a.seed = seed;
  NetworkClassifier clf(model);
  const auto r = pgd(clf, d.images, d.labels, a);
  return balanced_accuracy(d.labels, r.predictions, d.num_classes);
}

void write_epoch_csv(const std::string& path, const std::vector<EpochRecord>& epochs) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write epoch log '" + path + "'");
  f << "epoch,lr,train_loss,clean_val_balacc,adv_val_balacc,wall_time\n";
  f.precision(9);
  for (const auto& e : epochs) {
    f << e.epoch << ',' << e.lr << ',' << e.train_loss << ',' << e.clean_val_balacc << ',';
    if (e.adv_val_balacc >= 0.0) f << e.adv_val_balacc;
    else f << "nan";
    f << ',' << e.wall_time << '\n';
  }
}

namespace {

void add_weight_decay(const ParamSet& params, std::vector<Tensor>& grads, float wd) {
  if (wd == 0.0f) return;
  for (int i = 0; i < params.size(); ++i) {
    if (!params.name(i).ends_with(".w")) continue;  // conv and linear weights only
    auto g = grads[static_cast<std::size_t>(i)].data();
    auto p = params[i].data();
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += wd * p[k];
  }
}

TrainResult run_training(const ImageDataset& train, const ImageDataset& val, const ModelSpec& spec,
                         const TrainConfig& cfg, const TradesConfig* trades) {
  cfg.validate();
  if (trades) trades->validate();
  train.validate();
  val.validate();
  if (train.num_classes != spec.num_classes || val.num_classes != spec.num_classes) {
    throw DataError("dataset has " + std::to_string(train.num_classes) + " classes but the model expects " +
                    std::to_string(spec.num_classes));
  }
  if (train.channels() != spec.in_channels) {
    throw DataError("dataset has " + std::to_string(train.channels()) + " channels but the model expects " +
                    std::to_string(spec.in_channels));
  }
  const auto t0 = std::chrono::steady_clock::now();
  Model model = build_model(spec, derive_seed(cfg.seed, "init"));
  const auto n = train.size();
  const auto bs = static_cast<std::int64_t>(cfg.batch_size);
  std::int64_t per_epoch = (n + bs - 1) / bs;
  if (n % bs == 1 && per_epoch > 1) --per_epoch;  // a 1-sample batch has no batch statistics
  if (per_epoch < 1 || n < 2) throw DataError("training split needs at least 2 samples");
  const std::int64_t total = per_epoch * cfg.max_epochs;
  OptimState opt = OptimState::for_params(model.params, cfg.lr, cfg.momentum, total);
  EmaState ema = EmaState::from(model.params, model.buffers, cfg.ema_decay);
  EarlyStopState es;
  es.patience = cfg.patience;
  es.min_delta = cfg.min_delta;

  TrainResult res;
  res.total_steps = total;
  res.selection_metric = cfg.select_last ? "last_epoch" : trades ? "adv_val_balacc" : "clean_val_balacc";
  Model ema_model = model;
  res.model = model;
  std::int64_t skipped = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), std::int64_t{0});
    Rng shuffle(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(perm.begin(), perm.end(), shuffle.engine());
    Rng aug(cfg.seed, "augment", static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::int64_t loss_count = 0;
    double lr_epoch = 0.0;
    for (std::int64_t bi = 0; bi < per_epoch; ++bi) {
      const auto begin = bi * bs;
      const auto end = bi + 1 == per_epoch ? n : std::min(n, begin + bs);
      const std::span<const std::int64_t> rows(perm.data() + begin, static_cast<std::size_t>(end - begin));
      Tensor xb = train.images.gather_rows(rows);
      std::vector<int> yb(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) yb[i] = train.labels[static_cast<std::size_t>(rows[i])];
      if (cfg.augmentation) xb = augment_batch(xb, aug);

      const float lr = cosine_lr(opt.step, total, cfg.lr);
      if (bi == 0) lr_epoch = lr;
      double loss;
      std::vector<Tensor> grads;
      if (trades) {
        Rng attack_rng(cfg.seed, "trades", static_cast<std::uint64_t>(opt.step));
        auto r = trades_loss(model, xb, yb, *trades, cfg.label_smoothing, attack_rng);
        loss = r.loss;
        grads = std::move(r.param_grads);
      } else {
        Tape tape;
        const Tensor z = tape.forward(model.graph, model.params, model.buffers, xb, ForwardOptions{Mode::train, true});
        LossGrad ce = ce_smoothed(z, yb, cfg.label_smoothing);
        loss = ce.loss;
        grads = tape.backward(ce.grad, BackwardOptions{true, false}).params;
      }
      add_weight_decay(model.params, grads, cfg.weight_decay);
      try {
        sgd_nesterov_step(model.params, grads, opt, lr);
      } catch (const NonFiniteGradient& e) {
        ++skipped;
        ++opt.step;  // keep the schedule aligned
        continue;
      }
      ema_update(ema, model.params, model.buffers, ema_warmup_decay(cfg.ema_decay, ema.updates));
      loss_sum += loss;
      ++loss_count;
    }

    ema_model.params = ema.shadow;
    ema_model.buffers = ema.shadow_buffers;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_epoch;
    rec.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : NAN;
    rec.clean_val_balacc = clean_balacc(ema_model, val);
    if (trades || cfg.adv_val_for_standard) {
      rec.adv_val_balacc = adversarial_balacc(ema_model, val, trades ? trades->epsilon : cfg.val_epsilon,
                                              cfg.val_attack_steps, derive_seed(cfg.seed, "val_attack"),
                                              cfg.val_max_samples);
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.epochs.push_back(rec);
    const double metric = trades ? rec.adv_val_balacc : rec.clean_val_balacc;
    const auto decision = cfg.select_last ? StopDecision::continue_training : early_stop_check(es, metric, epoch);
    if (cfg.select_last) {
      res.model = ema_model;
      res.best_epoch = epoch;
      res.best_metric = metric;
    } else if (es.improved) {
      res.model = ema_model;
      res.best_epoch = epoch;
      res.best_metric = metric;
    }
    spdlog::info("epoch {:>3} lr {:.4f} loss {:.4f} val {:.4f} adv {:.4f}", epoch, rec.lr, rec.train_loss,
                 rec.clean_val_balacc, rec.adv_val_balacc);
    if (decision == StopDecision::stop) {
      spdlog::info("early stop at epoch {} (best epoch {}, {} = {:.4f})", epoch, es.best_epoch, res.selection_metric,
                   es.best_metric);
      res.stopped_early = true;
      break;
    }
  }
  if (res.best_epoch < 0) {
    res.model = ema_model;
    res.best_epoch = static_cast<int>(res.epochs.size()) - 1;
    res.best_metric = NAN;
  }
  if (skipped > 0) spdlog::warn("{} optimizer steps skipped for non-finite gradients", skipped);
  if (!cfg.epoch_log_csv.empty()) write_epoch_csv(cfg.epoch_log_csv, res.epochs);
  return res;
}

}  // namespace

TrainResult train_standard(const ImageDataset& train, const ImageDataset& val, const ModelSpec& spec,
                           const TrainConfig& cfg) {
  return run_training(train, val, spec, cfg, nullptr);
}

TrainResult train_trades(const ImageDataset& train, const ImageDataset& val, const ModelSpec& spec,
                         const TrainConfig& cfg, const TradesConfig& trades) {
  return run_training(train, val, spec, cfg, &trades);
}

}  // namespace nrf
