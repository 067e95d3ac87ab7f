#pragma once
// In-memory labelled image set. Images are raw pixels in [0,1], [N,C,H,W].

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "nrf/tensor.hpp"

namespace nrf {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ImageDataset {
  Tensor images;
  std::vector<int> labels;
  std::string split;
  int num_classes = 0;
  std::map<std::string, std::string> provenance;

  std::int64_t size() const noexcept { return static_cast<std::int64_t>(labels.size()); }
  std::int64_t channels() const { return images.size(1); }
  std::int64_t height() const { return images.size(2); }
  std::int64_t width() const { return images.size(3); }

  // Rows in the given order; provenance and split carried over.
  ImageDataset subset(std::span<const std::int64_t> rows) const;
  // First n rows in source order.
  ImageDataset take(std::int64_t n) const;

  // Throws DataError if shapes disagree, a pixel is outside [0,1] or non-finite,
  // or a label is outside [0, num_classes).
  void validate() const;
};

std::vector<std::int64_t> class_counts(const ImageDataset& d);

}  // namespace nrf
