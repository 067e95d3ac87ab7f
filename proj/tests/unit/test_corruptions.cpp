// Corruption kinds: fixed points, determinism, JPEG round trip, severity order.

#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "nrf/corruptions.hpp"
#include "nrf/datasets.hpp"

using namespace nrf;

namespace {

Tensor smooth_images(std::int64_t n, std::int64_t c, std::int64_t s, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor x({n, c, s, s});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double fx = 0.5 + 2.5 * u(rng), fy = 0.5 + 2.5 * u(rng), ph = 6.28 * u(rng), amp = 0.1 + 0.3 * u(rng);
      for (std::int64_t r = 0; r < s; ++r)
        for (std::int64_t q = 0; q < s; ++q) {
          const double v = 0.5 + amp * std::sin(fx * q / s * 6.28 + ph) * std::cos(fy * r / s * 6.28) + 0.03 * (u(rng) - 0.5);
          x.at(i, ch, r, q) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
  return x;
}

double psnr(const Tensor& a, const Tensor& b) {
  double mse = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) mse += (a[i] - static_cast<double>(b[i])) * (a[i] - static_cast<double>(b[i]));
  mse /= static_cast<double>(a.numel());
  return mse == 0.0 ? INFINITY : 10.0 * std::log10(1.0 / mse);
}

double mean_l2(const Tensor& a, const Tensor& b) {
  const auto n = a.size(0), per = a.numel() / n;
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t k = 0; k < per; ++k) s += std::pow(a[i * per + k] - static_cast<double>(b[i * per + k]), 2);
    total += std::sqrt(s);
  }
  return total / static_cast<double>(n);
}

// Direct-formula DCT-II, used as an oracle.
double naive_dct(const double* x, int u, int v) {
  auto a = [](int k) { return k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0); };
  double s = 0.0;
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      s += x[r * 8 + c] * std::cos((2 * r + 1) * u * std::numbers::pi / 16) * std::cos((2 * c + 1) * v * std::numbers::pi / 16);
  return a(u) * a(v) * s;
}

// Whole JPEG round trip from the direct formulas.
Tensor oracle_jpeg(const Tensor& x, int quality) {
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  const int luma[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,  14, 13, 16, 24, 40,  57,
                        69, 56, 14, 17, 22,  29,  51,  87,  80, 62, 18, 22, 37,  56,  68,  109, 103, 77, 24, 35, 55, 64,
                        81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
  Tensor out(x.shape());
  const auto H = x.size(2), W = x.size(3);
  for (std::int64_t n = 0; n < x.size(0); ++n)
    for (std::int64_t c = 0; c < x.size(1); ++c)
      for (std::int64_t by = 0; by < H; by += 8)
        for (std::int64_t bx = 0; bx < W; bx += 8) {
          double blk[64], q[64];
          for (int r = 0; r < 8; ++r)
            for (int k = 0; k < 8; ++k)
              blk[r * 8 + k] = 255.0 * x.at(n, c, std::min(H - 1, by + r), std::min(W - 1, bx + k)) - 128.0;
          for (int u = 0; u < 8; ++u)
            for (int v = 0; v < 8; ++v) {
              const double t = std::clamp((luma[u * 8 + v] * scale + 50) / 100, 1, 255);
              q[u * 8 + v] = std::nearbyint(naive_dct(blk, u, v) / t) * t;
            }
          for (int r = 0; r < 8 && by + r < H; ++r)
            for (int k = 0; k < 8 && bx + k < W; ++k) {
              double s = 0.0;
              for (int u = 0; u < 8; ++u)
                for (int v = 0; v < 8; ++v) {
                  const double au = u == 0 ? std::sqrt(1.0 / 8) : 0.5, av = v == 0 ? std::sqrt(1.0 / 8) : 0.5;
                  s += au * av * q[u * 8 + v] * std::cos((2 * r + 1) * u * std::numbers::pi / 16) *
                       std::cos((2 * k + 1) * v * std::numbers::pi / 16);
                }
              out.at(n, c, by + r, bx + k) = static_cast<float>(std::clamp((s + 128.0) / 255.0, 0.0, 1.0));
            }
        }
  return out;
}

}  // namespace

TEST_CASE("severity tables hold the declared parameters") {
  CHECK(severity_parameter(CorruptionKind::gaussian_noise, 1) == 0.04);
  CHECK(severity_parameter(CorruptionKind::impulse_noise, 5) == 0.07);
  CHECK(severity_parameter(CorruptionKind::gaussian_blur, 5) == 1.5);
  CHECK(severity_parameter(CorruptionKind::contrast, 2) == 0.6);
  CHECK(severity_parameter(CorruptionKind::brightness, 4) == 0.2);
  CHECK(severity_parameter(CorruptionKind::pixelate, 3) == 0.5);
  CHECK(severity_parameter(CorruptionKind::jpeg, 5) == 20);
  CHECK_THROWS_AS(severity_parameter(CorruptionKind::jpeg, 0), std::invalid_argument);
  CHECK_THROWS_AS(severity_parameter(CorruptionKind::jpeg, 6), std::invalid_argument);
  CHECK(benchmark_set(0).size() == 35);
}

TEST_CASE("unknown corruption names list the supported kinds") {
  try {
    parse_corruption("motion_blur");
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (auto k : benchmark_corruptions()) CHECK(msg.find(corruption_name(k)) != std::string::npos);
  }
  for (auto k : benchmark_corruptions()) CHECK(parse_corruption(corruption_name(k)) == k);
}

TEST_CASE("fixed points: unit contrast, vanishing blur, identity") {
  const Tensor x = smooth_images(4, 3, 16, 1);
  CHECK(max_abs_diff(apply_corruption(x, {CorruptionKind::contrast, 1, 0, 1.0}), x) < 1e-6);
  CHECK(max_abs_diff(gaussian_blur(x, 0.1), x) < 1e-6);
  CHECK(max_abs_diff(gaussian_blur(x, 0.0), x) == 0.0);
  CHECK(bitwise_equal(apply_corruption(x, {CorruptionKind::identity, 1, 0, std::nullopt}), x));
  CHECK(max_abs_diff(pixelate(x, 1.0), x) < 1e-6);
  // blur keeps the mean of a reflected-border image close; constant stays constant
  const Tensor c = gaussian_blur(Tensor({1, 1, 9, 9}, 0.3f), 1.5);
  for (float v : c.data()) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6).scale(1));
}

TEST_CASE("8x8 DCT agrees with the direct formula and inverts") {
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(-128.0, 127.0);
  double blk[64], coef[64], back[64];
  for (auto& v : blk) v = u(rng);
  dct8x8(blk, coef);
  for (int a = 0; a < 8; ++a)
    for (int b = 0; b < 8; ++b) CHECK(coef[a * 8 + b] == doctest::Approx(naive_dct(blk, a, b)).epsilon(1e-10).scale(1));
  idct8x8(coef, back);
  for (int i = 0; i < 64; ++i) CHECK(std::fabs(back[i] - blk[i]) < 1e-4);
}

TEST_CASE("jpeg: matches the oracle, PSNR bounds, constant images") {
  const Tensor x = smooth_images(3, 3, 20, 2);  // 20 is not a multiple of 8
  for (int q : {100, 80, 50, 20, 5}) {
    INFO("quality " << q);
    CHECK(max_abs_diff(jpeg_roundtrip(x, q), oracle_jpeg(x, q)) < 1e-5);
  }
  CHECK(psnr(x, jpeg_roundtrip(x, 100)) >= 40.0);
  double prev = INFINITY;
  for (int q : {100, 75, 50, 25, 10}) {
    const double p = psnr(x, jpeg_roundtrip(x, q));
    CHECK(p <= prev + 1e-9);
    prev = p;
  }
  // A constant block has only a DC term; the round trip moves it by at most
  // half a DC quantization step, i.e. q[0]/16 grey levels.
  for (float level : {0.0f, 0.2f, 0.5f, 0.73f, 1.0f}) {
    const Tensor cst({1, 1, 16, 16}, level);
    for (int q = 1; q <= 100; ++q) {
      const double bound = jpeg_quant_table(q)[0] / 16.0 / 255.0 + 1e-6;
      CHECK(max_abs_diff(jpeg_roundtrip(cst, q), cst) <= bound);
      if (q >= 50) CHECK(max_abs_diff(jpeg_roundtrip(cst, q), cst) <= 1.0 / 255.0 + 1e-6);
    }
  }
}

TEST_CASE("corruption is deterministic per (seed, kind, severity, index)") {
  const Tensor x = smooth_images(9, 1, 12, 3);
  for (const auto& spec : benchmark_set(11)) {
    const Tensor a = apply_corruption(x, spec);
    CHECK(bitwise_equal(a, apply_corruption(x, spec)));
    CHECK(bitwise_equal(a, apply_corruption(x, spec, 0, 4)));
    // a subset starting at row 5 corrupts identically when given its offset
    const Tensor tail = apply_corruption(x.slice_rows(5, 9), spec, 5);
    CHECK(bitwise_equal(tail, a.slice_rows(5, 9)));
    for (float v : a.data()) CHECK((v >= 0.0f && v <= 1.0f));
  }
  CorruptionSpec s{CorruptionKind::gaussian_noise, 3, 1, std::nullopt};
  CorruptionSpec t = s;
  t.seed = 2;
  CHECK_FALSE(bitwise_equal(apply_corruption(x, s), apply_corruption(x, t)));
}

TEST_CASE("extreme inputs stay finite and in range") {
  for (float level : {0.0f, 1.0f}) {
    const Tensor x({2, 3, 10, 10}, level);
    for (const auto& spec : benchmark_set(5)) {
      const Tensor y = apply_corruption(x, spec);
      CHECK(y.all_finite());
      for (float v : y.data()) CHECK((v >= 0.0f && v <= 1.0f));
    }
  }
}

TEST_CASE("mean L2 distortion is non-decreasing in severity for every kind") {
  SyntheticSpec sp;
  sp.size = 32;
  sp.train_per_class = 1;
  sp.val_per_class = 1;
  sp.test_per_class = 100;
  Tensor corpus = make_synthetic(sp).test.images;
  corpus = concat_rows(std::vector<Tensor>{corpus, smooth_images(200, 1, 32, 6)});
  for (CorruptionKind k : benchmark_corruptions()) {
    double prev = 0.0;
    for (int s = 1; s <= 5; ++s) {
      const double d = mean_l2(apply_corruption(corpus, {k, s, 8, std::nullopt}), corpus);
      INFO(corruption_name(k) << " severity " << s << ": " << d);
      CHECK(d >= prev);
      prev = d;
    }
  }
}

TEST_CASE("corrupted_eval with only the identity equals the clean score") {
  SyntheticSpec sp;
  sp.train_per_class = 1;
  sp.val_per_class = 1;
  sp.test_per_class = 30;
  const auto data = make_synthetic(sp);
  ModelSpec ms;
  ms.arch = Arch::small_cnn;
  ms.in_channels = 1;
  ms.base_width = 4;
  const Model m = build_model(ms, 3);
  const ClassMetrics clean = score_logits(predict_logits(m, data.test.images), data.test.labels, 2);
  const auto rep = corrupted_eval(m, data.test, {{CorruptionKind::identity, 1, 0, std::nullopt}});
  CHECK(rep.ood_balanced_accuracy == clean.balanced_accuracy);
  CHECK(rep.ood_auc == clean.auc);
  const auto two = corrupted_eval(m, data.test, {{CorruptionKind::contrast, 1, 0, std::nullopt}, {CorruptionKind::jpeg, 5, 0, std::nullopt}});
  CHECK(two.ood_balanced_accuracy ==
        doctest::Approx((two.cells[0].metrics.balanced_accuracy + two.cells[1].metrics.balanced_accuracy) / 2));
}
