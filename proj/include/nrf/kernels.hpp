#pragma once
// Data-parallel inner loops used by the network layers.
//
// Every kernel has a portable scalar reference in nrf::kernels::scalar and, on
// x86-64, an AVX2+FMA variant in nrf::kernels::avx2. The free functions in
// nrf::kernels forward to whichever table is active. The active table is
// picked once from CPUID and can be overridden with NRF_ISA=scalar|avx2 or
// set_isa(). Results of a given table are deterministic; the two tables agree
// to float rounding, which tests/unit/test_kernels.cpp checks.

#include <cstddef>
#include <span>
#include <string_view>

namespace nrf::kernels {

enum class Isa { scalar, avx2 };

enum class Trans { no, yes };

// Row-major C[m,n] = alpha * op(A)[m,k] * op(B)[k,n] + beta * C.
// lda/ldb/ldc are row strides of the stored (untransposed) matrices.
using GemmFn = void (*)(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a,
                        int lda, const float* b, int ldb, float beta, float* c, int ldc);
using UnaryFn = void (*)(const float* x, float* y, std::size_t n);
using BinaryFn = void (*)(const float* x, const float* dy, float* dx, std::size_t n);
using SumFn = float (*)(const float* x, std::size_t n);
using AxpyFn = void (*)(float a, const float* x, float* y, std::size_t n);

struct KernelTable {
  Isa isa;
  GemmFn gemm;
  UnaryFn swish_forward;    // y = x * sigmoid(x)
  BinaryFn swish_backward;  // dx = dy * d/dx[x * sigmoid(x)]
  SumFn sum;                // pairwise summation
  AxpyFn axpy;              // y += a * x
};

namespace scalar {
const KernelTable& table();
}
namespace avx2 {
// Only valid when isa_supported(Isa::avx2).
const KernelTable& table();
}

bool isa_supported(Isa isa);
Isa active_isa();
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);
const KernelTable& active();

inline void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  active().gemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}
inline void swish_forward(std::span<const float> x, std::span<float> y) {
  active().swish_forward(x.data(), y.data(), x.size());
}
inline void swish_backward(std::span<const float> x, std::span<const float> dy,
                           std::span<float> dx) {
  active().swish_backward(x.data(), dy.data(), dx.data(), x.size());
}
inline float sum(std::span<const float> x) { return active().sum(x.data(), x.size()); }
inline void axpy(float a, std::span<const float> x, std::span<float> y) {
  active().axpy(a, x.data(), y.data(), x.size());
}

// RAII override of the active table, for tests and benchmarks.
class ScopedIsa {
 public:
  explicit ScopedIsa(Isa isa) : previous_(active_isa()) { set_isa(isa); }
  ~ScopedIsa() { set_isa(previous_); }
  ScopedIsa(const ScopedIsa&) = delete;
  ScopedIsa& operator=(const ScopedIsa&) = delete;

 private:
  Isa previous_;
};

}  // namespace nrf::kernels
