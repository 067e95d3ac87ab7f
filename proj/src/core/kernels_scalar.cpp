#include "nrf/kernels.hpp"

#include <cmath>

namespace nrf::kernels::scalar {
namespace {

void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == 0.0f) {
      for (int j = 0; j < n; ++j) crow[j] = 0.0f;
    } else if (beta != 1.0f) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int p = 0; p < k; ++p) {
      const float aip = alpha * (ta == Trans::no ? a[static_cast<std::ptrdiff_t>(i) * lda + p]
                                                 : a[static_cast<std::ptrdiff_t>(p) * lda + i]);
      if (tb == Trans::no) {
        const float* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += aip * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
      }
    }
  }
}

inline float sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

void swish_forward(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

void swish_backward(const float* x, const float* dy, float* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const float s = sigmoid(x[i]);
    dx[i] = dy[i] * (s * (1.0f + x[i] * (1.0f - s)));
  }
}

float sum(const float* x, std::size_t n) {
  if (n <= 64) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
  }
  // Split on a multiple of 64 so block boundaries match the SIMD variant.
  const std::size_t half = ((n / 2 + 63) / 64) * 64;
  return sum(x, half) + sum(x + half, n - half);
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable& table() {
  static const KernelTable t{Isa::scalar, gemm, swish_forward, swish_backward, sum, axpy};
  return t;
}

}  // namespace nrf::kernels::scalar
