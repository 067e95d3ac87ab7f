#include "nrf/dataset.hpp"

#include <algorithm>
#include <cmath>

namespace nrf {

ImageDataset ImageDataset::subset(std::span<const std::int64_t> rows) const {
  ImageDataset out;
  out.images = images.gather_rows(rows);
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels.at(static_cast<std::size_t>(r)));
  out.split = split;
  out.num_classes = num_classes;
  out.provenance = provenance;
  return out;
}

ImageDataset ImageDataset::take(std::int64_t n) const {
  n = std::min(n, size());
  std::vector<std::int64_t> rows(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
  return subset(rows);
}

void ImageDataset::validate() const {
  if (images.dim() != 4) throw DataError(split + ": images must be [N,C,H,W], got " + shape_str(images.shape()));
  if (images.size(0) != size()) {
    throw DataError(split + ": " + std::to_string(images.size(0)) + " images but " + std::to_string(size()) + " labels");
  }
  if (num_classes < 2) throw DataError(split + ": num_classes must be >= 2");
  for (float v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError(split + ": pixel value outside [0,1]");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw DataError(split + ": label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                      " outside [0," + std::to_string(num_classes) + ")");
    }
  }
}

std::vector<std::int64_t> class_counts(const ImageDataset& d) {
  std::vector<std::int64_t> c(static_cast<std::size_t>(d.num_classes), 0);
  for (int y : d.labels) ++c.at(static_cast<std::size_t>(y));
  return c;
}

}  // namespace nrf
