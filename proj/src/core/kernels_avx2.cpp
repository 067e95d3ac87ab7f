// AVX2 + FMA variants. This translation unit is the only one compiled with
// -mavx2 -mfma; nothing here may run before isa_supported(Isa::avx2) is true.

#include "nrf/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cstdint>
#include <vector>

namespace nrf::kernels::avx2 {
namespace {

constexpr int kMr = 6;
constexpr int kNr = 16;
constexpr int kKc = 256;
constexpr int kMc = 72;
constexpr int kNc = 1024;

inline float load_a(Trans ta, const float* a, int lda, int i, int p) {
  return ta == Trans::no ? a[static_cast<std::ptrdiff_t>(i) * lda + p]
                         : a[static_cast<std::ptrdiff_t>(p) * lda + i];
}

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of alpha*op(A) into kMr-row panels.
void pack_a(Trans ta, const float* a, int lda, int i0, int mc, int p0, int kc, float alpha,
            float* out) {
  for (int ir = 0; ir < mc; ir += kMr) {
    const int rows = std::min(kMr, mc - ir);
    for (int p = 0; p < kc; ++p) {
      for (int ii = 0; ii < kMr; ++ii) {
        *out++ = ii < rows ? alpha * load_a(ta, a, lda, i0 + ir + ii, p0 + p) : 0.0f;
      }
    }
  }
}

// Packs rows [p0, p0+kc) x cols [j0, j0+nc) of op(B) into kNr-column panels.
void pack_b(Trans tb, const float* b, int ldb, int p0, int kc, int j0, int nc, float* out) {
  for (int jr = 0; jr < nc; jr += kNr) {
    const int cols = std::min(kNr, nc - jr);
    if (tb == Trans::no && cols == kNr) {
      for (int p = 0; p < kc; ++p) {
        const float* src = b + static_cast<std::ptrdiff_t>(p0 + p) * ldb + j0 + jr;
        _mm256_storeu_ps(out, _mm256_loadu_ps(src));
        _mm256_storeu_ps(out + 8, _mm256_loadu_ps(src + 8));
        out += kNr;
      }
      continue;
    }
    for (int p = 0; p < kc; ++p) {
      for (int jj = 0; jj < kNr; ++jj) {
        float v = 0.0f;
        if (jj < cols) {
          const int j = j0 + jr + jj;
          v = tb == Trans::no ? b[static_cast<std::ptrdiff_t>(p0 + p) * ldb + j]
                              : b[static_cast<std::ptrdiff_t>(j) * ldb + p0 + p];
        }
        *out++ = v;
      }
    }
  }
}

// acc[kMr x kNr] = Apanel * Bpanel over kc.
inline void micro_kernel(int kc, const float* ap, const float* bp, float* acc) {
  __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
  __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
  __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
  __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
  __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
  __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    __m256 a = _mm256_broadcast_ss(ap + 0);
    c00 = _mm256_fmadd_ps(a, b0, c00);
    c01 = _mm256_fmadd_ps(a, b1, c01);
    a = _mm256_broadcast_ss(ap + 1);
    c10 = _mm256_fmadd_ps(a, b0, c10);
    c11 = _mm256_fmadd_ps(a, b1, c11);
    a = _mm256_broadcast_ss(ap + 2);
    c20 = _mm256_fmadd_ps(a, b0, c20);
    c21 = _mm256_fmadd_ps(a, b1, c21);
    a = _mm256_broadcast_ss(ap + 3);
    c30 = _mm256_fmadd_ps(a, b0, c30);
    c31 = _mm256_fmadd_ps(a, b1, c31);
    a = _mm256_broadcast_ss(ap + 4);
    c40 = _mm256_fmadd_ps(a, b0, c40);
    c41 = _mm256_fmadd_ps(a, b1, c41);
    a = _mm256_broadcast_ss(ap + 5);
    c50 = _mm256_fmadd_ps(a, b0, c50);
    c51 = _mm256_fmadd_ps(a, b1, c51);
    ap += kMr;
    bp += kNr;
  }
  _mm256_storeu_ps(acc + 0 * kNr, c00);
  _mm256_storeu_ps(acc + 0 * kNr + 8, c01);
  _mm256_storeu_ps(acc + 1 * kNr, c10);
  _mm256_storeu_ps(acc + 1 * kNr + 8, c11);
  _mm256_storeu_ps(acc + 2 * kNr, c20);
  _mm256_storeu_ps(acc + 2 * kNr + 8, c21);
  _mm256_storeu_ps(acc + 3 * kNr, c30);
  _mm256_storeu_ps(acc + 3 * kNr + 8, c31);
  _mm256_storeu_ps(acc + 4 * kNr, c40);
  _mm256_storeu_ps(acc + 4 * kNr + 8, c41);
  _mm256_storeu_ps(acc + 5 * kNr, c50);
  _mm256_storeu_ps(acc + 5 * kNr + 8, c51);
}

// first_block selects C = beta*C + acc, otherwise C += acc.
inline void store_tile(const float* acc, float* c, int ldc, int rows, int cols, bool first_block,
                       float beta) {
  for (int ii = 0; ii < rows; ++ii) {
    float* crow = c + static_cast<std::ptrdiff_t>(ii) * ldc;
    const float* arow = acc + ii * kNr;
    if (cols == kNr) {
      for (int h = 0; h < kNr; h += 8) {
        const __m256 v = _mm256_loadu_ps(arow + h);
        if (first_block && beta == 0.0f) {
          _mm256_storeu_ps(crow + h, v);
        } else if (first_block && beta != 1.0f) {
          _mm256_storeu_ps(crow + h,
                           _mm256_fmadd_ps(_mm256_set1_ps(beta), _mm256_loadu_ps(crow + h), v));
        } else {
          _mm256_storeu_ps(crow + h, _mm256_add_ps(_mm256_loadu_ps(crow + h), v));
        }
      }
      continue;
    }
    for (int jj = 0; jj < cols; ++jj) {
      if (first_block && beta == 0.0f) {
        crow[jj] = arow[jj];
      } else if (first_block && beta != 1.0f) {
        crow[jj] = beta * crow[jj] + arow[jj];
      } else {
        crow[jj] += arow[jj];
      }
    }
  }
}

void gemm(Trans ta, Trans tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0 || alpha == 0.0f) {
    for (int i = 0; i < m; ++i) {
      float* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < n; ++j) crow[j] = beta == 0.0f ? 0.0f : beta * crow[j];
    }
    return;
  }
  thread_local std::vector<float> apack;
  thread_local std::vector<float> bpack;
  apack.resize(static_cast<std::size_t>(kMc + kMr) * kKc);
  bpack.resize(static_cast<std::size_t>(kNc + kNr) * kKc);
  alignas(32) float acc[kMr * kNr];

  for (int jc = 0; jc < n; jc += kNc) {
    const int nc = std::min(kNc, n - jc);
    for (int pc = 0; pc < k; pc += kKc) {
      const int kc = std::min(kKc, k - pc);
      const bool first_block = pc == 0;
      pack_b(tb, b, ldb, pc, kc, jc, nc, bpack.data());
      for (int ic = 0; ic < m; ic += kMc) {
        const int mc = std::min(kMc, m - ic);
        pack_a(ta, a, lda, ic, mc, pc, kc, alpha, apack.data());
        for (int jr = 0; jr < nc; jr += kNr) {
          const int cols = std::min(kNr, nc - jr);
          const float* bp = bpack.data() + static_cast<std::ptrdiff_t>(jr) * kc;
          for (int ir = 0; ir < mc; ir += kMr) {
            const int rows = std::min(kMr, mc - ir);
            const float* ap = apack.data() + static_cast<std::ptrdiff_t>(ir) * kc;
            micro_kernel(kc, ap, bp, acc);
            float* ctile = c + static_cast<std::ptrdiff_t>(ic + ir) * ldc + jc + jr;
            store_tile(acc, ctile, ldc, rows, cols, first_block, beta);
          }
        }
      }
    }
  }
}

// Cephes-style single precision exp; max relative error ~2 ulp on [-88, 88].
inline __m256 exp256(__m256 x) {
  const __m256 hi = _mm256_set1_ps(88.3762626647949f);
  const __m256 lo = _mm256_set1_ps(-88.3762626647949f);
  x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
  __m256 fx = _mm256_fmadd_ps(x, _mm256_set1_ps(1.44269504088896341f), _mm256_set1_ps(0.5f));
  fx = _mm256_floor_ps(fx);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
  x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
  const __m256 z = _mm256_mul_ps(x, x);
  __m256 y = _mm256_set1_ps(1.9875691500E-4f);
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507E-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073E-3f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894E-2f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459E-1f));
  y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201E-1f));
  y = _mm256_fmadd_ps(y, z, x);
  y = _mm256_add_ps(y, _mm256_set1_ps(1.0f));
  __m256i e = _mm256_cvttps_epi32(fx);
  e = _mm256_add_epi32(e, _mm256_set1_epi32(127));
  e = _mm256_slli_epi32(e, 23);
  return _mm256_mul_ps(y, _mm256_castsi256_ps(e));
}

inline __m256 sigmoid256(__m256 x) {
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 e = exp256(_mm256_sub_ps(_mm256_setzero_ps(), x));
  return _mm256_div_ps(one, _mm256_add_ps(one, e));
}

inline float sigmoid1(float x) {
  alignas(32) float buf[8] = {x};
  _mm256_store_ps(buf, sigmoid256(_mm256_load_ps(buf)));
  return buf[0];
}

void swish_forward(const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    _mm256_storeu_ps(y + i, _mm256_mul_ps(v, sigmoid256(v)));
  }
  for (; i < n; ++i) y[i] = x[i] * sigmoid1(x[i]);
}

void swish_backward(const float* x, const float* dy, float* dx, std::size_t n) {
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 s = sigmoid256(v);
    // s * (1 + x * (1 - s))
    const __m256 d = _mm256_mul_ps(s, _mm256_fmadd_ps(v, _mm256_sub_ps(one, s), one));
    _mm256_storeu_ps(dx + i, _mm256_mul_ps(_mm256_loadu_ps(dy + i), d));
  }
  for (; i < n; ++i) {
    const float s = sigmoid1(x[i]);
    dx[i] = dy[i] * (s * (1.0f + x[i] * (1.0f - s)));
  }
}

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

float sum(const float* x, std::size_t n) {
  if (n <= 64) {
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
    float tail = 0.0f;
    for (; i < n; ++i) tail += x[i];
    return hsum(acc) + tail;
  }
  const std::size_t half = ((n / 2 + 63) / 64) * 64;
  return sum(x, half) + sum(x + half, n - half);
}

void axpy(float a, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(a);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

}  // namespace

const KernelTable& table() {
  static const KernelTable t{Isa::avx2, gemm, swish_forward, swish_backward, sum, axpy};
  return t;
}

}  // namespace nrf::kernels::avx2
