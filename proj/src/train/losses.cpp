#include "nrf/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "nrf/ops.hpp"

namespace nrf {
namespace {

void check_logits(const Tensor& logits, std::size_t n, const char* what) {
  if (logits.dim() != 2 || logits.size(0) != static_cast<std::int64_t>(n)) {
    throw std::invalid_argument(std::string(what) + ": logits must be [N,C] with N == labels.size()");
  }
}

void check_label(int y, std::int64_t c) {
  if (y < 0 || y >= c) throw std::out_of_range("label " + std::to_string(y) + " outside [0," + std::to_string(c) + ")");
}

}  // namespace

LossGrad ce_smoothed(const Tensor& logits, std::span<const int> labels, float smoothing) {
  check_logits(logits, labels.size(), "ce_smoothed");
  if (!(smoothing >= 0.0f && smoothing < 1.0f)) throw std::invalid_argument("ce_smoothed: smoothing must be in [0,1)");
  const auto n = logits.size(0), c = logits.size(1);
  const Tensor logp = ops::log_softmax(logits);
  LossGrad out;
  out.grad = Tensor(logits.shape());
  const double off = static_cast<double>(smoothing) / static_cast<double>(c);
  const double on = 1.0 - smoothing + off;
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    check_label(y, c);
    double row = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      const double t = k == y ? on : off;
      const double lp = logp[i * c + k];
      row -= t * lp;
      out.grad[i * c + k] = static_cast<float>((std::exp(lp) - t) / static_cast<double>(n));
    }
    total += row;
  }
  out.loss = n == 0 ? 0.0 : total / static_cast<double>(n);
  return out;
}

double kl_div(const Tensor& p, const Tensor& q) {
  if (p.dim() != 2 || p.shape() != q.shape()) throw std::invalid_argument("kl_div: p and q must be [N,C] of equal shape");
  const auto n = p.size(0), c = p.size(1);
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double sp = 0.0, sq = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      sp += p[i * c + k];
      sq += q[i * c + k];
    }
    if (std::fabs(sp - 1.0) > 1e-5 || std::fabs(sq - 1.0) > 1e-5) {
      throw std::invalid_argument("kl_div: row " + std::to_string(i) + " is not a probability vector");
    }
    for (std::int64_t k = 0; k < c; ++k) {
      const double pk = p[i * c + k];
      if (pk <= 0.0) continue;
      total += pk * (std::log(pk) - std::log(std::max<double>(q[i * c + k], 1e-12)));
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

KlGrad kl_logits(const Tensor& logits_p, const Tensor& logits_q) {
  if (logits_p.dim() != 2 || logits_p.shape() != logits_q.shape()) {
    throw std::invalid_argument("kl_logits: logits must be [N,C] of equal shape");
  }
  const auto n = logits_p.size(0), c = logits_p.size(1);
  const Tensor lp = ops::log_softmax(logits_p);
  const Tensor lq = ops::log_softmax(logits_q);
  const double floor = std::log(1e-12);
  KlGrad out;
  out.grad_p = Tensor(logits_p.shape());
  out.grad_q = Tensor(logits_q.shape());
  const double inv_n = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  std::vector<double> l(static_cast<std::size_t>(c));
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double mean_l = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      const double p = std::exp(static_cast<double>(lp[i * c + k]));
      const double logq = std::max<double>(lq[i * c + k], floor);
      l[static_cast<std::size_t>(k)] = p > 0.0 ? lp[i * c + k] - logq : 0.0;
      mean_l += p * l[static_cast<std::size_t>(k)];
    }
    total += mean_l;
    for (std::int64_t k = 0; k < c; ++k) {
      const double p = std::exp(static_cast<double>(lp[i * c + k]));
      const double q = std::exp(static_cast<double>(lq[i * c + k]));
      out.grad_p[i * c + k] = static_cast<float>(p * (l[static_cast<std::size_t>(k)] - mean_l) * inv_n);
      out.grad_q[i * c + k] = static_cast<float>((q - p) * inv_n);
    }
  }
  out.loss = total * inv_n;
  return out;
}

std::vector<double> ce_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels.size(), "ce_per_sample");
  const auto n = logits.size(0), c = logits.size(1);
  const Tensor logp = ops::log_softmax(logits);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    check_label(y, c);
    out[static_cast<std::size_t>(i)] = -static_cast<double>(logp[i * c + y]);
  }
  return out;
}

std::vector<double> margin_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels.size(), "margin_per_sample");
  const auto n = logits.size(0), c = logits.size(1);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    check_label(y, c);
    double other = -INFINITY;
    for (std::int64_t k = 0; k < c; ++k) {
      if (k != y) other = std::max<double>(other, logits[i * c + k]);
    }
    out[static_cast<std::size_t>(i)] = other - logits[i * c + y];
  }
  return out;
}

}  // namespace nrf
