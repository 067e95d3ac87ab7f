#include "nrf/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "nrf/kernels.hpp"

namespace nrf::ops {
namespace {

using kernels::Trans;

// Upper bound on im2col buffer size; larger batches are processed in chunks.
constexpr std::int64_t kMaxColFloats = std::int64_t{1} << 23;

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  std::int64_t k() const { return cin * kh * kw; }
  std::int64_t p() const { return ho * wo; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.dim() != 4) throw ShapeError("conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.dim() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(w.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3), w.size(0), w.size(2), w.size(3), 0, 0, stride, padding};
  if (w.size(1) != g.cin) {
    throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels but kernel expects " +
                     std::to_string(w.size(1)));
  }
  if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                     " larger than padded input " + std::to_string(g.h + 2 * padding) + "x" +
                     std::to_string(g.w + 2 * padding));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  return g;
}

std::int64_t chunk_size(const ConvGeom& g) {
  const std::int64_t per_sample = std::max<std::int64_t>(1, g.k() * g.p());
  return std::clamp<std::int64_t>(kMaxColFloats / per_sample, 1, std::max<std::int64_t>(1, g.n));
}

// col[k, (n - n0) * P + q] for samples [n0, n0 + cn).
void im2col(const Tensor& x, const ConvGeom& g, std::int64_t n0, std::int64_t cn, float* col) {
  const std::int64_t ld = cn * g.p();
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        float* row = col + ((ci * g.kh + ki) * g.kw + kj) * ld;
        for (std::int64_t n = 0; n < cn; ++n) {
          const float* plane = x.ptr() + ((n0 + n) * g.cin + ci) * g.h * g.w;
          float* out = row + n * g.p();
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            float* orow = out + oh * g.wo;
            if (ih < 0 || ih >= g.h) {
              std::fill(orow, orow + g.wo, 0.0f);
              continue;
            }
            const float* irow = plane + ih * g.w;
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              orow[ow] = (iw >= 0 && iw < g.w) ? irow[iw] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const float* col, const ConvGeom& g, std::int64_t n0, std::int64_t cn, Tensor& dx) {
  const std::int64_t ld = cn * g.p();
  for (std::int64_t ci = 0; ci < g.cin; ++ci) {
    for (std::int64_t ki = 0; ki < g.kh; ++ki) {
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const float* row = col + ((ci * g.kh + ki) * g.kw + kj) * ld;
        for (std::int64_t n = 0; n < cn; ++n) {
          float* plane = dx.ptr() + ((n0 + n) * g.cin + ci) * g.h * g.w;
          const float* in = row + n * g.p();
          for (std::int64_t oh = 0; oh < g.ho; ++oh) {
            const std::int64_t ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h) continue;
            float* drow = plane + ih * g.w;
            const float* irow = in + oh * g.wo;
            for (std::int64_t ow = 0; ow < g.wo; ++ow) {
              const std::int64_t iw = ow * g.stride - g.pad + kj;
              if (iw >= 0 && iw < g.w) drow[iw] += irow[ow];
            }
          }
        }
      }
    }
  }
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void check_channels(const Tensor& x, const Tensor& p, const char* what) {
  if (x.dim() != 4) throw ShapeError(std::string(what) + ": expected [N,C,H,W], got " + shape_str(x.shape()));
  if (p.numel() != x.size(1)) {
    throw ShapeError(std::string(what) + ": per-channel tensor has " + std::to_string(p.numel()) +
                     " entries for " + std::to_string(x.size(1)) + " channels");
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  const ConvGeom g = conv_geometry(x, w, stride, padding);
  Tensor y({g.n, g.cout, g.ho, g.wo});
  if (g.n == 0) return y;
  const std::int64_t chunk = chunk_size(g);
  std::vector<float> col(static_cast<std::size_t>(g.k() * chunk * g.p()));
  std::vector<float> out(static_cast<std::size_t>(g.cout * chunk * g.p()));
  for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::int64_t cn = std::min(chunk, g.n - n0);
    const int cols = static_cast<int>(cn * g.p());
    im2col(x, g, n0, cn, col.data());
    kernels::gemm(Trans::no, Trans::no, static_cast<int>(g.cout), cols, static_cast<int>(g.k()), 1.0f,
                  w.ptr(), static_cast<int>(g.k()), col.data(), cols, 0.0f, out.data(), cols);
    for (std::int64_t co = 0; co < g.cout; ++co) {
      for (std::int64_t n = 0; n < cn; ++n) {
        std::memcpy(y.ptr() + ((n0 + n) * g.cout + co) * g.p(), out.data() + co * cols + n * g.p(),
                    static_cast<std::size_t>(g.p()) * sizeof(float));
      }
    }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& dy, int stride, int padding,
                     Tensor* dx, Tensor* dw) {
  const ConvGeom g = conv_geometry(x, w, stride, padding);
  if (dy.shape() != Shape{g.n, g.cout, g.ho, g.wo}) {
    throw ShapeError("conv2d_backward: dy has shape " + shape_str(dy.shape()));
  }
  if (dx) *dx = Tensor(x.shape());
  if (dw) check_same(*dw, w, "conv2d_backward dw");
  if ((!dx && !dw) || g.n == 0) return;
  const std::int64_t chunk = chunk_size(g);
  std::vector<float> col(static_cast<std::size_t>(g.k() * chunk * g.p()));
  std::vector<float> dyc(static_cast<std::size_t>(g.cout * chunk * g.p()));
  for (std::int64_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::int64_t cn = std::min(chunk, g.n - n0);
    const int cols = static_cast<int>(cn * g.p());
    for (std::int64_t co = 0; co < g.cout; ++co) {
      for (std::int64_t n = 0; n < cn; ++n) {
        std::memcpy(dyc.data() + co * cols + n * g.p(), dy.ptr() + ((n0 + n) * g.cout + co) * g.p(),
                    static_cast<std::size_t>(g.p()) * sizeof(float));
      }
    }
    if (dw) {
      im2col(x, g, n0, cn, col.data());
      kernels::gemm(Trans::no, Trans::yes, static_cast<int>(g.cout), static_cast<int>(g.k()), cols, 1.0f,
                    dyc.data(), cols, col.data(), cols, 1.0f, dw->ptr(), static_cast<int>(g.k()));
    }
    if (dx) {
      kernels::gemm(Trans::yes, Trans::no, static_cast<int>(g.k()), cols, static_cast<int>(g.cout), 1.0f,
                    w.ptr(), static_cast<int>(g.k()), dyc.data(), cols, 0.0f, col.data(), cols);
      col2im_add(col.data(), g, n0, cn, *dx);
    }
  }
}

Tensor swish(const Tensor& x) {
  Tensor y(x.shape());
  kernels::swish_forward(x.data(), y.data());
  return y;
}

Tensor swish_backward(const Tensor& x, const Tensor& dy) {
  check_same(x, dy, "swish_backward");
  Tensor dx(x.shape());
  kernels::swish_backward(x.data(), dy.data(), dx.data());
  return dx;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnMode mode,
                  const Tensor& running_mean, const Tensor& running_var, float eps,
                  const BnRunning& update, BnSaved* saved) {
  check_channels(x, gamma, "batch_norm gamma");
  check_channels(x, beta, "batch_norm beta");
  check_channels(x, running_mean, "batch_norm running_mean");
  check_channels(x, running_var, "batch_norm running_var");
  const std::int64_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  const std::int64_t m = n * hw;
  std::vector<float> mean(static_cast<std::size_t>(c)), invstd(static_cast<std::size_t>(c));
  if (mode == BnMode::train) {
    if (m < 2) throw ShapeError("batch_norm: train mode needs N*H*W >= 2, got " + std::to_string(m));
    std::vector<float> buf(static_cast<std::size_t>(m));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t i = 0; i < n; ++i) {
        std::memcpy(buf.data() + i * hw, x.ptr() + (i * c + ch) * hw, static_cast<std::size_t>(hw) * sizeof(float));
      }
      const float mu = kernels::sum(buf) / static_cast<float>(m);
      for (auto& v : buf) v = (v - mu) * (v - mu);
      const float var = kernels::sum(buf) / static_cast<float>(m);
      mean[static_cast<std::size_t>(ch)] = mu;
      invstd[static_cast<std::size_t>(ch)] = 1.0f / std::sqrt(var + eps);
      if (update.mean && update.var) {
        const float unbiased = var * static_cast<float>(m) / static_cast<float>(m - 1);
        (*update.mean)[ch] = update.momentum * (*update.mean)[ch] + (1.0f - update.momentum) * mu;
        (*update.var)[ch] = update.momentum * (*update.var)[ch] + (1.0f - update.momentum) * unbiased;
      }
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[static_cast<std::size_t>(ch)] = running_mean[ch];
      invstd[static_cast<std::size_t>(ch)] = 1.0f / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float mu = mean[static_cast<std::size_t>(ch)];
      const float scale = invstd[static_cast<std::size_t>(ch)] * gamma[ch];
      const float shift = beta[ch];
      const float* src = x.ptr() + (i * c + ch) * hw;
      float* dst = y.ptr() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) dst[k] = (src[k] - mu) * scale + shift;
    }
  }
  if (saved) {
    saved->mean = std::move(mean);
    saved->invstd = std::move(invstd);
  }
  return y;
}

void batch_norm_backward(const Tensor& x, const Tensor& gamma, const Tensor& dy, BnMode mode,
                         const BnSaved& saved, Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  check_same(x, dy, "batch_norm_backward");
  const std::int64_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  const std::int64_t m = n * hw;
  if (dx) *dx = Tensor(x.shape());
  std::vector<float> a(static_cast<std::size_t>(m)), b(static_cast<std::size_t>(m));
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const float mu = saved.mean[static_cast<std::size_t>(ch)];
    const float is = saved.invstd[static_cast<std::size_t>(ch)];
    // a = dy, b = dy * xhat
    for (std::int64_t i = 0; i < n; ++i) {
      const float* xs = x.ptr() + (i * c + ch) * hw;
      const float* ds = dy.ptr() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) {
        a[static_cast<std::size_t>(i * hw + k)] = ds[k];
        b[static_cast<std::size_t>(i * hw + k)] = ds[k] * (xs[k] - mu) * is;
      }
    }
    const float sum_dy = kernels::sum(a);
    const float sum_dy_xhat = kernels::sum(b);
    if (dgamma) (*dgamma)[ch] += sum_dy_xhat;
    if (dbeta) (*dbeta)[ch] += sum_dy;
    if (!dx) continue;
    const float g = gamma[ch];
    for (std::int64_t i = 0; i < n; ++i) {
      const float* xs = x.ptr() + (i * c + ch) * hw;
      const float* ds = dy.ptr() + (i * c + ch) * hw;
      float* out = dx->ptr() + (i * c + ch) * hw;
      if (mode == BnMode::train) {
        const float inv_m = 1.0f / static_cast<float>(m);
        for (std::int64_t k = 0; k < hw; ++k) {
          const float xhat = (xs[k] - mu) * is;
          out[k] = g * is * (ds[k] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
        }
      } else {
        for (std::int64_t k = 0; k < hw; ++k) out[k] = g * is * ds[k];
      }
    }
  }
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.dim() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + shape_str(x.shape()));
  const std::int64_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  Tensor y({n, c});
  for (std::int64_t i = 0; i < n * c; ++i) {
    y[i] = kernels::sum(std::span<const float>(x.ptr() + i * hw, static_cast<std::size_t>(hw))) /
           static_cast<float>(hw);
  }
  return y;
}

Tensor global_avg_pool_backward(const Shape& x_shape, const Tensor& dy) {
  Tensor dx(x_shape);
  const std::int64_t nc = x_shape[0] * x_shape[1], hw = x_shape[2] * x_shape[3];
  if (dy.numel() != nc) throw ShapeError("global_avg_pool_backward: dy has shape " + shape_str(dy.shape()));
  for (std::int64_t i = 0; i < nc; ++i) {
    const float v = dy[i] / static_cast<float>(hw);
    std::fill(dx.ptr() + i * hw, dx.ptr() + (i + 1) * hw, v);
  }
  return dx;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.dim() != 2 || w.dim() != 2 || w.size(1) != x.size(1) || b.numel() != w.size(0)) {
    throw ShapeError("linear: incompatible shapes x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) +
                     " b" + shape_str(b.shape()));
  }
  const std::int64_t n = x.size(0), in = x.size(1), out = w.size(0);
  Tensor y({n, out});
  for (std::int64_t i = 0; i < n; ++i) std::memcpy(y.ptr() + i * out, b.ptr(), static_cast<std::size_t>(out) * sizeof(float));
  kernels::gemm(Trans::no, Trans::yes, static_cast<int>(n), static_cast<int>(out), static_cast<int>(in), 1.0f,
                x.ptr(), static_cast<int>(in), w.ptr(), static_cast<int>(in), 1.0f, y.ptr(),
                static_cast<int>(out));
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor* dx, Tensor* dw,
                     Tensor* db) {
  const std::int64_t n = x.size(0), in = x.size(1), out = w.size(0);
  if (dy.shape() != Shape{n, out}) throw ShapeError("linear_backward: dy has shape " + shape_str(dy.shape()));
  if (dx) {
    *dx = Tensor({n, in});
    kernels::gemm(Trans::no, Trans::no, static_cast<int>(n), static_cast<int>(in), static_cast<int>(out), 1.0f,
                  dy.ptr(), static_cast<int>(out), w.ptr(), static_cast<int>(in), 0.0f, dx->ptr(),
                  static_cast<int>(in));
  }
  if (dw) {
    kernels::gemm(Trans::yes, Trans::no, static_cast<int>(out), static_cast<int>(in), static_cast<int>(n), 1.0f,
                  dy.ptr(), static_cast<int>(out), x.ptr(), static_cast<int>(in), 1.0f, dw->ptr(),
                  static_cast<int>(in));
  }
  if (db) {
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t j = 0; j < out; ++j) (*db)[j] += dy[i * out + j];
    }
  }
}

Tensor standardize(const Tensor& x, std::span<const float> mean, std::span<const float> stdev) {
  if (x.dim() != 4 || static_cast<std::int64_t>(mean.size()) != x.size(1) || stdev.size() != mean.size()) {
    throw ShapeError("standardize: constants do not match channels of " + shape_str(x.shape()));
  }
  const std::int64_t n = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float mu = mean[static_cast<std::size_t>(ch)];
      const float inv = 1.0f / stdev[static_cast<std::size_t>(ch)];
      const float* s = x.ptr() + (i * c + ch) * hw;
      float* d = y.ptr() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) d[k] = (s[k] - mu) * inv;
    }
  }
  return y;
}

Tensor standardize_backward(const Tensor& dy, std::span<const float> stdev) {
  const std::int64_t n = dy.size(0), c = dy.size(1), hw = dy.size(2) * dy.size(3);
  Tensor dx(dy.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const float inv = 1.0f / stdev[static_cast<std::size_t>(ch)];
      const float* s = dy.ptr() + (i * c + ch) * hw;
      float* d = dx.ptr() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) d[k] = s[k] * inv;
    }
  }
  return dx;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Tensor y = a;
  kernels::axpy(1.0f, b.data(), y.data());
  return y;
}

Tensor softmax(const Tensor& logits) {
  if (logits.dim() != 2) throw ShapeError("softmax expects [N,C], got " + shape_str(logits.shape()));
  const std::int64_t n = logits.size(0), c = logits.size(1);
  Tensor p(logits.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const float* z = logits.ptr() + i * c;
    float* out = p.ptr() + i * c;
    const float mx = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      out[j] = std::exp(z[j] - mx);
      total += out[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::int64_t j = 0; j < c; ++j) out[j] *= inv;
  }
  return p;
}

Tensor log_softmax(const Tensor& logits) {
  if (logits.dim() != 2) throw ShapeError("log_softmax expects [N,C], got " + shape_str(logits.shape()));
  const std::int64_t n = logits.size(0), c = logits.size(1);
  Tensor out(logits.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const float* z = logits.ptr() + i * c;
    const float mx = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::int64_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(z[j] - mx));
    const float lse = mx + static_cast<float>(std::log(total));
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = z[j] - lse;
  }
  return out;
}

}  // namespace nrf::ops
