#include "nrf/corruptions.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <thread>

#include "nrf/rng.hpp"

namespace nrf {

namespace {

struct KindInfo {
  CorruptionKind kind;
  const char* name;
  std::array<double, 5> table;
};

constexpr std::array<KindInfo, 8> kKinds = {{
    {CorruptionKind::gaussian_noise, "gaussian_noise", {0.04, 0.06, 0.08, 0.09, 0.10}},
    {CorruptionKind::impulse_noise, "impulse_noise", {0.01, 0.02, 0.03, 0.05, 0.07}},
    {CorruptionKind::gaussian_blur, "gaussian_blur", {0.4, 0.6, 0.8, 1.0, 1.5}},
    {CorruptionKind::contrast, "contrast", {0.75, 0.6, 0.45, 0.3, 0.2}},
    {CorruptionKind::brightness, "brightness", {0.05, 0.1, 0.15, 0.2, 0.3}},
    {CorruptionKind::pixelate, "pixelate", {0.8, 0.65, 0.5, 0.4, 0.3}},
    {CorruptionKind::jpeg, "jpeg", {80, 65, 50, 35, 20}},
    {CorruptionKind::identity, "identity", {0, 0, 0, 0, 0}},
}};

const KindInfo& info(CorruptionKind k) {
  for (const auto& i : kKinds)
    if (i.kind == k) return i;
  throw std::invalid_argument("bad corruption kind");
}

constexpr std::array<int, 64> kLuma = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                       14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                       18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                       49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

// c[k][n] of the orthonormal DCT-II.
const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> b = [] {
    std::array<double, 64> m{};
    for (int k = 0; k < 8; ++k)
      for (int n = 0; n < 8; ++n) {
        const double a = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        m[static_cast<std::size_t>(k * 8 + n)] = a * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0);
      }
    return m;
  }();
  return b;
}

std::int64_t reflect(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

void clamp01(float* p, std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) p[i] = std::clamp(p[i], 0.0f, 1.0f);
}

// One plane [h,w], separable Gaussian with reflected borders.
void blur_plane(const float* x, float* out, std::int64_t h, std::int64_t w, double sigma) {
  if (!(sigma > 0.0)) {
    std::copy(x, x + h * w, out);
    return;
  }
  const auto radius = static_cast<std::int64_t>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::int64_t i = -radius; i <= radius; ++i) {
    k[static_cast<std::size_t>(i + radius)] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    total += k[static_cast<std::size_t>(i + radius)];
  }
  for (auto& v : k) v /= total;
  std::vector<double> tmp(static_cast<std::size_t>(h * w));
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (std::int64_t i = -radius; i <= radius; ++i) acc += k[static_cast<std::size_t>(i + radius)] * x[r * w + reflect(c + i, w)];
      tmp[static_cast<std::size_t>(r * w + c)] = acc;
    }
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (std::int64_t i = -radius; i <= radius; ++i)
        acc += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(reflect(r + i, h) * w + c)];
      out[r * w + c] = static_cast<float>(acc);
    }
}

// Area-average weights mapping n inputs to m outputs.
std::vector<std::vector<std::pair<std::int64_t, double>>> area_weights(std::int64_t n, std::int64_t m) {
  std::vector<std::vector<std::pair<std::int64_t, double>>> w(static_cast<std::size_t>(m));
  const double r = static_cast<double>(n) / static_cast<double>(m);
  for (std::int64_t o = 0; o < m; ++o) {
    const double lo = o * r, hi = (o + 1) * r;
    for (auto i = static_cast<std::int64_t>(std::floor(lo)); i < n && i < hi; ++i) {
      const double overlap = std::min(hi, static_cast<double>(i + 1)) - std::max(lo, static_cast<double>(i));
      if (overlap > 1e-12) w[static_cast<std::size_t>(o)].emplace_back(i, overlap / r);
    }
  }
  return w;
}

void pixelate_plane(const float* x, float* out, std::int64_t h, std::int64_t w, double scale) {
  const auto sh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * scale));
  const auto sw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * scale));
  const auto wy = area_weights(h, sh), wx = area_weights(w, sw);
  std::vector<double> small(static_cast<std::size_t>(sh * sw));
  for (std::int64_t a = 0; a < sh; ++a)
    for (std::int64_t b = 0; b < sw; ++b) {
      double acc = 0.0;
      for (auto [i, u] : wy[static_cast<std::size_t>(a)])
        for (auto [j, v] : wx[static_cast<std::size_t>(b)]) acc += u * v * x[i * w + j];
      small[static_cast<std::size_t>(a * sw + b)] = acc;
    }
  // Box upsampling: each output pixel averages the coarse cells it overlaps.
  const auto uy = area_weights(sh, h), ux = area_weights(sw, w);
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      for (auto [a, u] : uy[static_cast<std::size_t>(r)])
        for (auto [b, v] : ux[static_cast<std::size_t>(c)]) acc += u * v * small[static_cast<std::size_t>(a * sw + b)];
      out[r * w + c] = static_cast<float>(acc);
    }
}

void jpeg_plane(const float* x, float* out, std::int64_t h, std::int64_t w, const std::vector<int>& q) {
  std::array<double, 64> blk{}, coef{}, rec{};
  for (std::int64_t by = 0; by < h; by += 8)
    for (std::int64_t bx = 0; bx < w; bx += 8) {
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
          const auto yy = std::min(h - 1, by + r), xx = std::min(w - 1, bx + c);  // edge replication
          blk[static_cast<std::size_t>(r * 8 + c)] = 255.0 * x[yy * w + xx] - 128.0;
        }
      dct8x8(blk.data(), coef.data());
      for (std::size_t i = 0; i < 64; ++i) coef[i] = std::nearbyint(coef[i] / q[i]) * q[i];
      idct8x8(coef.data(), rec.data());
      for (int r = 0; r < 8 && by + r < h; ++r)
        for (int c = 0; c < 8 && bx + c < w; ++c)
          out[(by + r) * w + bx + c] = static_cast<float>((rec[static_cast<std::size_t>(r * 8 + c)] + 128.0) / 255.0);
    }
}

}  // namespace

std::string corruption_name(CorruptionKind k) { return info(k).name; }

CorruptionKind parse_corruption(const std::string& name) {
  for (const auto& i : kKinds)
    if (name == i.name) return i.kind;
  std::string list;
  for (const auto& i : kKinds) list += (list.empty() ? "" : ", ") + std::string(i.name);
  throw std::invalid_argument("unknown corruption '" + name + "' (supported: " + list + ")");
}

const std::vector<CorruptionKind>& benchmark_corruptions() {
  static const std::vector<CorruptionKind> v = {CorruptionKind::gaussian_noise, CorruptionKind::impulse_noise,
                                                CorruptionKind::gaussian_blur,  CorruptionKind::contrast,
                                                CorruptionKind::brightness,     CorruptionKind::pixelate,
                                                CorruptionKind::jpeg};
  return v;
}

double severity_parameter(CorruptionKind kind, int severity) {
  if (severity < 1 || severity > 5) throw std::invalid_argument("corruption severity must be in 1..5, got " + std::to_string(severity));
  return info(kind).table[static_cast<std::size_t>(severity - 1)];
}

double CorruptionSpec::value() const { return parameter ? *parameter : severity_parameter(kind, severity); }

void CorruptionSpec::validate() const {
  severity_parameter(kind, severity);
  const double v = value();
  if (!std::isfinite(v)) throw std::invalid_argument("corruption parameter must be finite");
  if (kind == CorruptionKind::jpeg && (v < 1 || v > 100)) throw std::invalid_argument("jpeg quality must be in 1..100");
  if (kind == CorruptionKind::pixelate && !(v > 0.0 && v <= 1.0)) throw std::invalid_argument("pixelate scale must be in (0,1]");
  if ((kind == CorruptionKind::gaussian_noise || kind == CorruptionKind::gaussian_blur || kind == CorruptionKind::contrast) && v < 0.0) {
    throw std::invalid_argument(corruption_name(kind) + " parameter must be >= 0");
  }
  if (kind == CorruptionKind::impulse_noise && !(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("impulse fraction must be in [0,1]");
}

std::string CorruptionSpec::label() const { return corruption_name(kind) + "/" + std::to_string(severity); }

std::vector<int> jpeg_quant_table(int quality) {
  quality = std::clamp(quality, 1, 100);
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::vector<int> q(64);
  for (std::size_t i = 0; i < 64; ++i) q[i] = std::clamp((kLuma[i] * scale + 50) / 100, 1, 255);
  return q;
}

void dct8x8(const double* in, double* out) {
  const auto& b = dct_basis();
  double tmp[64];
  for (int r = 0; r < 8; ++r)
    for (int k = 0; k < 8; ++k) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += b[static_cast<std::size_t>(k * 8 + n)] * in[r * 8 + n];
      tmp[r * 8 + k] = s;
    }
  for (int k = 0; k < 8; ++k)
    for (int c = 0; c < 8; ++c) {
      double s = 0.0;
      for (int n = 0; n < 8; ++n) s += b[static_cast<std::size_t>(k * 8 + n)] * tmp[n * 8 + c];
      out[k * 8 + c] = s;
    }
}

void idct8x8(const double* in, double* out) {
  const auto& b = dct_basis();
  double tmp[64];
  for (int r = 0; r < 8; ++r)
    for (int n = 0; n < 8; ++n) {
      double s = 0.0;
      for (int k = 0; k < 8; ++k) s += b[static_cast<std::size_t>(k * 8 + n)] * in[r * 8 + k];
      tmp[r * 8 + n] = s;
    }
  for (int n = 0; n < 8; ++n)
    for (int c = 0; c < 8; ++c) {
      double s = 0.0;
      for (int k = 0; k < 8; ++k) s += b[static_cast<std::size_t>(k * 8 + n)] * tmp[k * 8 + c];
      out[n * 8 + c] = s;
    }
}

void corrupt_image(const float* x, float* out, std::int64_t c, std::int64_t h, std::int64_t w, const CorruptionSpec& spec,
                   std::uint64_t index) {
  const std::int64_t plane = h * w, n = c * plane;
  const double v = spec.value();
  Rng rng(derive_seed(spec.seed, spec.label()), "sample", index);
  switch (spec.kind) {
    case CorruptionKind::identity:
      std::copy(x, x + n, out);
      break;
    case CorruptionKind::gaussian_noise: {
      std::normal_distribution<double> nd(0.0, v);
      for (std::int64_t i = 0; i < n; ++i) out[i] = static_cast<float>(x[i] + nd(rng.engine()));
      break;
    }
    case CorruptionKind::impulse_noise: {
      std::uniform_real_distribution<double> ud(0.0, 1.0);
      for (std::int64_t i = 0; i < n; ++i) {
        const bool hit = ud(rng.engine()) < v;
        const bool salt = rng.coin();
        out[i] = hit ? (salt ? 1.0f : 0.0f) : x[i];
      }
      break;
    }
    case CorruptionKind::gaussian_blur:
      for (std::int64_t ch = 0; ch < c; ++ch) blur_plane(x + ch * plane, out + ch * plane, h, w, v);
      break;
    case CorruptionKind::contrast:
      for (std::int64_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) mean += x[ch * plane + i];
        mean /= static_cast<double>(plane);
        for (std::int64_t i = 0; i < plane; ++i) out[ch * plane + i] = static_cast<float>(mean + v * (x[ch * plane + i] - mean));
      }
      break;
    case CorruptionKind::brightness:
      for (std::int64_t i = 0; i < n; ++i) out[i] = static_cast<float>(x[i] + v);
      break;
    case CorruptionKind::pixelate:
      for (std::int64_t ch = 0; ch < c; ++ch) pixelate_plane(x + ch * plane, out + ch * plane, h, w, v);
      break;
    case CorruptionKind::jpeg: {
      const auto q = jpeg_quant_table(static_cast<int>(std::lround(v)));
      for (std::int64_t ch = 0; ch < c; ++ch) jpeg_plane(x + ch * plane, out + ch * plane, h, w, q);
      break;
    }
  }
  clamp01(out, n);
}

Tensor apply_corruption(const Tensor& x, const CorruptionSpec& spec, std::uint64_t first_index, int workers) {
  if (x.dim() != 4) throw ShapeError("apply_corruption: expected [N,C,H,W], got " + shape_str(x.shape()));
  spec.validate();
  Tensor out(x.shape());
  const auto n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3), per = c * h * w;
  auto run = [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      corrupt_image(x.ptr() + i * per, out.ptr() + i * per, c, h, w, spec, first_index + static_cast<std::uint64_t>(i));
  };
  workers = static_cast<int>(std::clamp<std::int64_t>(workers, 1, std::max<std::int64_t>(1, n)));
  if (workers == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(run, n * t / workers, n * (t + 1) / workers);
    for (auto& th : pool) th.join();
  }
  return out;
}

Tensor gaussian_blur(const Tensor& x, double sigma) {
  CorruptionSpec s{CorruptionKind::gaussian_blur, 1, 0, sigma};
  return apply_corruption(x, s);
}

Tensor pixelate(const Tensor& x, double scale) {
  CorruptionSpec s{CorruptionKind::pixelate, 1, 0, scale};
  return apply_corruption(x, s);
}

Tensor jpeg_roundtrip(const Tensor& x, int quality) {
  CorruptionSpec s{CorruptionKind::jpeg, 1, 0, static_cast<double>(quality)};
  return apply_corruption(x, s);
}

std::vector<CorruptionSpec> benchmark_set(std::uint64_t seed) {
  std::vector<CorruptionSpec> v;
  for (CorruptionKind k : benchmark_corruptions())
    for (int s = 1; s <= 5; ++s) v.push_back({k, s, seed, std::nullopt});
  return v;
}

CorruptionReport corrupted_eval(const Model& model, const ImageDataset& test, const std::vector<CorruptionSpec>& set,
                                int workers) {
  if (set.empty()) throw std::invalid_argument("corrupted_eval: empty corruption set");
  CorruptionReport rep;
  for (const auto& spec : set) {
    CorruptionCell cell;
    cell.spec = spec;
    cell.parameter = spec.value();
    const Tensor xc = apply_corruption(test.images, spec, 0, workers);
    cell.metrics = score_logits(predict_logits(model, xc), test.labels, test.num_classes);
    rep.ood_balanced_accuracy += cell.metrics.balanced_accuracy;
    rep.ood_auc += cell.metrics.auc;
    rep.cells.push_back(std::move(cell));
  }
  rep.ood_balanced_accuracy /= static_cast<double>(rep.cells.size());
  rep.ood_auc /= static_cast<double>(rep.cells.size());
  return rep;
}

}  // namespace nrf
