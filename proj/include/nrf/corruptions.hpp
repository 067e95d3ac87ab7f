#pragma once
// Severity-graded, seeded image corruptions and the averaged corrupted-set
// evaluation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nrf/dataset.hpp"
#include "nrf/metrics.hpp"
#include "nrf/model.hpp"

namespace nrf {

// `identity` is not one of the benchmark kinds; it exists so that evaluation
// plumbing can be checked against the clean path.
enum class CorruptionKind { gaussian_noise, impulse_noise, gaussian_blur, contrast, brightness, pixelate, jpeg, identity };

std::string corruption_name(CorruptionKind k);
// Throws std::invalid_argument listing the supported kinds.
CorruptionKind parse_corruption(const std::string& name);
const std::vector<CorruptionKind>& benchmark_corruptions();

// Table value for (kind, severity 1..5):
//   gaussian_noise sigma, impulse_noise fraction, gaussian_blur sigma (px),
//   contrast factor, brightness shift, pixelate scale, jpeg quality.
double severity_parameter(CorruptionKind kind, int severity);

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::gaussian_noise;
  int severity = 1;
  std::uint64_t seed = 0;
  std::optional<double> parameter;  // overrides the table value

  double value() const;
  void validate() const;
  std::string label() const;  // e.g. "gaussian_noise/3"
};

// One image [C,H,W] (pointer to C*H*W floats) corrupted in place of `out`.
// Deterministic in (spec, index).
void corrupt_image(const float* x, float* out, std::int64_t c, std::int64_t h, std::int64_t w, const CorruptionSpec& spec,
                   std::uint64_t index);

// Corrupts every row; row i uses stream index first_index + i. The result does
// not depend on `workers`.
Tensor apply_corruption(const Tensor& x, const CorruptionSpec& spec, std::uint64_t first_index = 0, int workers = 1);

// Pieces, exposed for tests.
Tensor gaussian_blur(const Tensor& x, double sigma);
Tensor pixelate(const Tensor& x, double scale);
// Per-channel 8x8 DCT round trip with the standard luminance table scaled
// by quality (Q < 50: 5000/Q, else 200 - 2Q). No entropy coding.
Tensor jpeg_roundtrip(const Tensor& x, int quality);
std::vector<int> jpeg_quant_table(int quality);
// Orthonormal 8x8 DCT-II and its inverse on a row-major block.
void dct8x8(const double* in, double* out);
void idct8x8(const double* in, double* out);

struct CorruptionCell {
  CorruptionSpec spec;
  double parameter = 0.0;
  ClassMetrics metrics;
};

struct CorruptionReport {
  std::vector<CorruptionCell> cells;
  double ood_balanced_accuracy = 0.0;  // unweighted mean over cells
  double ood_auc = 0.0;
};

// The full benchmark set: seven kinds x severities 1..5.
std::vector<CorruptionSpec> benchmark_set(std::uint64_t seed);
CorruptionReport corrupted_eval(const Model& model, const ImageDataset& test, const std::vector<CorruptionSpec>& set,
                                int workers = 1);

}  // namespace nrf
