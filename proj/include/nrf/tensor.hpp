#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nrf {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major float32 array. Invariant: numel(shape) == data.size().
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }
  static Tensor from(Shape shape, std::initializer_list<float> values);

  const Shape& shape() const noexcept { return shape_; }
  int dim() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t size(int axis) const;
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  float operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Element access for 4-D [N,C,H,W] tensors.
  float& at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  float at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
    return data_[static_cast<std::size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }

  Tensor reshaped(Shape shape) const;
  // Rows [begin, end) along axis 0.
  Tensor slice_rows(std::int64_t begin, std::int64_t end) const;
  // Rows gathered along axis 0 in the given order.
  Tensor gather_rows(std::span<const std::int64_t> rows) const;
  std::int64_t row_numel() const;

  void fill(float v);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

// Bitwise equality (distinguishes -0 from +0 and compares NaN payloads).
bool bitwise_equal(const Tensor& a, const Tensor& b);
float max_abs_diff(const Tensor& a, const Tensor& b);

// Row-wise argmax of a [N, C] tensor.
std::vector<int> argmax_rows(const Tensor& logits);

// Concatenate along axis 0; trailing shapes must agree.
Tensor concat_rows(std::span<const Tensor> parts);

}  // namespace nrf
