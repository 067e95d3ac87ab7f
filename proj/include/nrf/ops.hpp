#pragma once
// Layer primitives with explicit backward passes. The Graph executor in
// graph.hpp composes these; they are also usable directly.

#include <optional>

#include "nrf/tensor.hpp"

namespace nrf::ops {

// Cross-correlation (no kernel flip). x [N,Cin,H,W], w [Cout,Cin,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// Gradients of conv2d. Either output pointer may be null to skip that work.
// dw is accumulated into (must be pre-sized), dx is overwritten.
void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride, int padding,
                     Tensor* dx, Tensor* dw);

Tensor swish(const Tensor& x);
Tensor swish_backward(const Tensor& x, const Tensor& dy);

enum class BnMode { train, eval };

struct BnSaved {
  std::vector<float> mean;
  std::vector<float> invstd;
};

struct BnRunning {
  Tensor* mean = nullptr;
  Tensor* var = nullptr;
  float momentum = 0.9f;  // running = momentum * running + (1 - momentum) * batch
};

// Per-channel batch normalisation over (N,H,W). In train mode the batch
// statistics are used and, when running.mean/var are non-null, the running
// estimates are updated. In eval mode running_mean/running_var are used.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnMode mode,
                  const Tensor& running_mean, const Tensor& running_var, float eps,
                  const BnRunning& update, BnSaved* saved);

// dgamma/dbeta accumulated into; dx overwritten (may be null).
void batch_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& dy, BnMode mode,
                         const BnSaved& saved, Tensor* dx, Tensor* dgamma, Tensor* dbeta);

Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_backward(const Shape& x_shape, const Tensor& dy);

// y [N,out] = x [N,in] * w[out,in]^T + b[out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw,
                     Tensor* db);

// Per-channel (x - mean[c]) / std[c] with constants.
Tensor standardize(const Tensor& x, std::span<const float> mean, std::span<const float> stdev);
Tensor standardize_backward(const Tensor& dy, std::span<const float> stdev);

Tensor add(const Tensor& a, const Tensor& b);

// Row-wise softmax of [N,C] logits (max-subtracted).
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);

}  // namespace nrf::ops
