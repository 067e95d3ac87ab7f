#pragma once
// NPY v1.0 (little-endian) reader and writer for u1, i8 and f4 payloads.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nrf/dataset.hpp"
#include "nrf/tensor.hpp"

namespace nrf {

enum class DType { u8, i64, f32 };

std::string dtype_descr(DType t);  // "|u1", "<i8", "<f4"
std::size_t dtype_size(DType t);

class NpyError : public DataError {
 public:
  enum class Kind { bad_magic, unsupported_version, bad_header, unsupported_dtype, truncated };
  NpyError(Kind kind, const std::string& what) : DataError(what), kind(kind) {}
  Kind kind;
};

// Payload is always row-major after parsing.
struct NpyArray {
  DType dtype = DType::f32;
  Shape shape;
  bool fortran_order = false;  // as declared by the source header
  std::vector<std::uint8_t> data;

  std::int64_t numel() const { return shape_numel(shape); }

  static NpyArray from_tensor(const Tensor& t);
  static NpyArray from_u8(Shape shape, std::vector<std::uint8_t> values);
  static NpyArray from_i64(Shape shape, std::span<const std::int64_t> values);

  // Element-wise conversion; u8 values are NOT rescaled.
  Tensor to_tensor() const;
  std::vector<std::int64_t> to_i64() const;
};

NpyArray parse_npy(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> write_npy(const NpyArray& array);

}  // namespace nrf
