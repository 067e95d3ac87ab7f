#pragma once
// Classification losses with their logit gradients. All reductions are batch
// means unless noted.

#include <span>
#include <vector>

#include "nrf/tensor.hpp"

namespace nrf {

struct LossGrad {
  double loss = 0.0;
  Tensor grad;  // d(loss)/d(logits), same shape as logits
};

// Cross-entropy against targets (1 - s) + s/C on the true class and s/C
// elsewhere. Throws std::out_of_range for a label outside [0, C).
LossGrad ce_smoothed(const Tensor& logits, std::span<const int> labels, float smoothing);

// Mean over rows of sum p * (ln p - ln q) with 0 ln 0 = 0 and q floored at
// 1e-12. Rows must be probability vectors (sum 1 +- 1e-5).
double kl_div(const Tensor& p, const Tensor& q);

struct KlGrad {
  double loss = 0.0;
  Tensor grad_p;  // d/d(logits of p)
  Tensor grad_q;  // d/d(logits of q)
};
// KL(softmax(logits_p) || softmax(logits_q)), batch mean.
KlGrad kl_logits(const Tensor& logits_p, const Tensor& logits_q);

// Per-sample losses (no reduction), used by attacks.
std::vector<double> ce_per_sample(const Tensor& logits, std::span<const int> labels);
// max_{j != y} z_j - z_y.
std::vector<double> margin_per_sample(const Tensor& logits, std::span<const int> labels);

}  // namespace nrf
