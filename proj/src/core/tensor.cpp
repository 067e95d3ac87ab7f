#include "nrf/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace nrf {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, float fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError("shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                     " elements, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::from(Shape shape, std::initializer_list<float> values) {
  return Tensor(std::move(shape), std::vector<float>(values));
}

std::int64_t Tensor::size(int axis) const {
  if (axis < 0) axis += dim();
  if (axis < 0 || axis >= dim()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::int64_t Tensor::row_numel() const {
  if (shape_.empty()) throw ShapeError("row access on a scalar tensor");
  return shape_[0] == 0 ? 0 : numel() / shape_[0];
}

Tensor Tensor::slice_rows(std::int64_t begin, std::int64_t end) const {
  if (begin < 0 || end < begin || end > size(0)) {
    throw ShapeError("row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for shape " + shape_str(shape_));
  }
  const auto row = row_numel();
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<float>(data_.begin() + begin * row, data_.begin() + end * row));
}

Tensor Tensor::gather_rows(std::span<const std::int64_t> rows) const {
  const auto row = row_numel();
  Shape s = shape_;
  s[0] = static_cast<std::int64_t>(rows.size());
  Tensor out(std::move(s));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= shape_[0]) throw ShapeError("gather row index out of range");
    std::memcpy(out.ptr() + static_cast<std::int64_t>(i) * row, ptr() + rows[i] * row,
                static_cast<std::size_t>(row) * sizeof(float));
  }
  return out;
}

void Tensor::fill(float v) {
  for (auto& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (float x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.ptr(), b.ptr(), static_cast<std::size_t>(a.numel()) * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  float m = 0.0f;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.dim() != 2) throw ShapeError("argmax_rows expects [N,C], got " + shape_str(logits.shape()));
  const auto n = logits.size(0);
  const auto c = logits.size(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const float* row = logits.ptr() + i * c;
    int best = 0;
    for (std::int64_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = static_cast<int>(j);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    Shape tail_a(s.begin() + 1, s.end());
    Shape tail_b(p.shape().begin() + 1, p.shape().end());
    if (p.dim() != static_cast<int>(s.size()) || tail_a != tail_b) {
      throw ShapeError("concat_rows: incompatible shapes " + shape_str(s) + " and " + shape_str(p.shape()));
    }
    rows += p.size(0);
  }
  s[0] = rows;
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(shape_numel(s)));
  for (const auto& p : parts) data.insert(data.end(), p.storage().begin(), p.storage().end());
  return Tensor(std::move(s), std::move(data));
}

}  // namespace nrf
