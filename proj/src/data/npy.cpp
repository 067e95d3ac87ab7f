#include "nrf/npy.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>

namespace nrf {
namespace {

constexpr std::uint8_t kMagic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};

[[noreturn]] void fail(NpyError::Kind kind, const std::string& msg) { throw NpyError(kind, msg); }

// Minimal parser for the header literal: {'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }
class HeaderParser {
 public:
  explicit HeaderParser(std::string_view s) : s_(s) {}

  void parse(std::string& descr, bool& fortran, Shape& shape) {
    bool have_descr = false, have_order = false, have_shape = false;
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') break;
      const std::string key = quoted();
      expect(':');
      if (key == "descr") {
        descr = quoted();
        have_descr = true;
      } else if (key == "fortran_order") {
        fortran = boolean();
        have_order = true;
      } else if (key == "shape") {
        shape = tuple();
        have_shape = true;
      } else {
        fail(NpyError::Kind::bad_header, "NPY header: unexpected key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    if (!have_descr || !have_order || !have_shape) {
      fail(NpyError::Kind::bad_header, "NPY header: missing descr, fortran_order or shape");
    }
  }

 private:
  char peek() {
    if (pos_ >= s_.size()) fail(NpyError::Kind::bad_header, "NPY header: unexpected end");
    return s_[pos_];
  }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  void expect(char c) {
    skip_ws();
    if (peek() != c) fail(NpyError::Kind::bad_header, std::string("NPY header: expected '") + c + "'");
    ++pos_;
  }
  std::string quoted() {
    skip_ws();
    const char q = peek();
    if (q != '\'' && q != '"') fail(NpyError::Kind::bad_header, "NPY header: expected a quoted string");
    const auto end = s_.find(q, pos_ + 1);
    if (end == std::string_view::npos) fail(NpyError::Kind::bad_header, "NPY header: unterminated string");
    std::string out(s_.substr(pos_ + 1, end - pos_ - 1));
    pos_ = end + 1;
    return out;
  }
  bool boolean() {
    skip_ws();
    if (s_.substr(pos_, 4) == "True") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "False") {
      pos_ += 5;
      return false;
    }
    fail(NpyError::Kind::bad_header, "NPY header: fortran_order must be True or False");
  }
  Shape tuple() {
    expect('(');
    Shape out;
    while (true) {
      skip_ws();
      if (peek() == ')') {
        ++pos_;
        return out;
      }
      std::int64_t v = 0;
      const auto start = pos_;
      while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
        v = v * 10 + (s_[pos_] - '0');
        ++pos_;
      }
      if (pos_ == start) fail(NpyError::Kind::bad_header, "NPY header: malformed shape");
      out.push_back(v);
      skip_ws();
      if (peek() == ',') ++pos_;
    }
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

DType parse_descr(const std::string& d) {
  if (d == "|u1" || d == "<u1") return DType::u8;
  if (d == "<i8") return DType::i64;
  if (d == "<f4") return DType::f32;
  if (d.find('O') != std::string::npos) fail(NpyError::Kind::unsupported_dtype, "NPY: object arrays are not supported");
  fail(NpyError::Kind::unsupported_dtype, "NPY: unsupported dtype '" + d + "' (supported: |u1, <i8, <f4)");
}

// Reorders a column-major payload to row-major.
std::vector<std::uint8_t> fortran_to_c(const std::vector<std::uint8_t>& src, const Shape& shape, std::size_t item) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<std::uint8_t> dst(src.size());
  const std::size_t nd = shape.size();
  std::vector<std::int64_t> idx(nd, 0);
  for (std::size_t c_off = 0; c_off < n; ++c_off) {
    std::size_t f_off = 0, stride = 1;
    for (std::size_t a = 0; a < nd; ++a) {
      f_off += static_cast<std::size_t>(idx[a]) * stride;
      stride *= static_cast<std::size_t>(shape[a]);
    }
    std::memcpy(dst.data() + c_off * item, src.data() + f_off * item, item);
    for (std::size_t a = nd; a-- > 0;) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  return dst;
}

}  // namespace

std::string dtype_descr(DType t) {
  switch (t) {
    case DType::u8: return "|u1";
    case DType::i64: return "<i8";
    case DType::f32: return "<f4";
  }
  return "?";
}

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::u8: return 1;
    case DType::i64: return 8;
    case DType::f32: return 4;
  }
  return 0;
}

NpyArray NpyArray::from_tensor(const Tensor& t) {
  NpyArray a;
  a.dtype = DType::f32;
  a.shape = t.shape();
  a.data.resize(static_cast<std::size_t>(t.numel()) * 4);
  if (!a.data.empty()) std::memcpy(a.data.data(), t.ptr(), a.data.size());
  return a;
}

NpyArray NpyArray::from_u8(Shape shape, std::vector<std::uint8_t> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) throw ShapeError("NpyArray::from_u8: size mismatch");
  NpyArray a;
  a.dtype = DType::u8;
  a.shape = std::move(shape);
  a.data = std::move(values);
  return a;
}

NpyArray NpyArray::from_i64(Shape shape, std::span<const std::int64_t> values) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) throw ShapeError("NpyArray::from_i64: size mismatch");
  NpyArray a;
  a.dtype = DType::i64;
  a.shape = std::move(shape);
  a.data.resize(values.size() * 8);
  if (!values.empty()) std::memcpy(a.data.data(), values.data(), a.data.size());
  return a;
}

Tensor NpyArray::to_tensor() const {
  Tensor t(shape);
  const auto n = static_cast<std::size_t>(numel());
  switch (dtype) {
    case DType::f32:
      if (n) std::memcpy(t.ptr(), data.data(), n * 4);
      break;
    case DType::u8:
      for (std::size_t i = 0; i < n; ++i) t[static_cast<std::int64_t>(i)] = data[i];
      break;
    case DType::i64:
      for (std::size_t i = 0; i < n; ++i) {
        std::int64_t v;
        std::memcpy(&v, data.data() + i * 8, 8);
        t[static_cast<std::int64_t>(i)] = static_cast<float>(v);
      }
      break;
  }
  return t;
}

std::vector<std::int64_t> NpyArray::to_i64() const {
  const auto n = static_cast<std::size_t>(numel());
  std::vector<std::int64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (dtype) {
      case DType::u8: out[i] = data[i]; break;
      case DType::i64: std::memcpy(&out[i], data.data() + i * 8, 8); break;
      case DType::f32: {
        float f;
        std::memcpy(&f, data.data() + i * 4, 4);
        if (f != static_cast<float>(static_cast<std::int64_t>(f))) throw DataError("NPY: non-integral value where integers expected");
        out[i] = static_cast<std::int64_t>(f);
        break;
      }
    }
  }
  return out;
}

NpyArray parse_npy(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 6 || !std::equal(kMagic, kMagic + 6, bytes.begin())) {
    fail(NpyError::Kind::bad_magic, "not an NPY stream");
  }
  if (bytes.size() < 10) fail(NpyError::Kind::truncated, "NPY: truncated preamble");
  if (bytes[6] != 1 || bytes[7] != 0) {
    fail(NpyError::Kind::unsupported_version,
         "NPY: version " + std::to_string(bytes[6]) + "." + std::to_string(bytes[7]) + " not supported (only 1.0)");
  }
  const std::size_t hlen = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
  if (bytes.size() < 10 + hlen) fail(NpyError::Kind::truncated, "NPY: truncated header");
  const std::string_view header(reinterpret_cast<const char*>(bytes.data() + 10), hlen);
  std::string descr;
  NpyArray a;
  HeaderParser(header).parse(descr, a.fortran_order, a.shape);
  a.dtype = parse_descr(descr);
  const auto expected = static_cast<std::size_t>(a.numel()) * dtype_size(a.dtype);
  const auto available = bytes.size() - 10 - hlen;
  if (available < expected) {
    fail(NpyError::Kind::truncated, "NPY: payload has " + std::to_string(available) + " bytes, header declares " +
                                         std::to_string(expected));
  }
  a.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(10 + hlen),
                bytes.begin() + static_cast<std::ptrdiff_t>(10 + hlen + expected));
  if (a.fortran_order && a.shape.size() > 1) a.data = fortran_to_c(a.data, a.shape, dtype_size(a.dtype));
  return a;
}

std::vector<std::uint8_t> write_npy(const NpyArray& a) {
  if (static_cast<std::size_t>(a.numel()) * dtype_size(a.dtype) != a.data.size()) {
    throw ShapeError("write_npy: payload size does not match shape");
  }
  std::string header = "{'descr': '" + dtype_descr(a.dtype) + "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < a.shape.size(); ++i) {
    header += std::to_string(a.shape[i]);
    if (a.shape.size() == 1 || i + 1 < a.shape.size()) header += ",";
    if (i + 1 < a.shape.size()) header += " ";
  }
  header += "), }";
  // Pad so that the payload starts on a 64-byte boundary.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  if (header.size() > 0xFFFF) throw DataError("write_npy: header too long for version 1.0");
  std::vector<std::uint8_t> out(kMagic, kMagic + 6);
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xFF));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

}  // namespace nrf
