#include "nrf/archive.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace nrf {
namespace {

constexpr std::uint32_t kLocalSig = 0x04034b50;
constexpr std::uint32_t kCentralSig = 0x02014b50;
constexpr std::uint32_t kEndSig = 0x06054b50;
constexpr std::uint32_t kZip64EndSig = 0x06064b50;
constexpr std::uint32_t kZip64LocatorSig = 0x07064b50;
constexpr std::uint16_t kDosDate = (0 << 9) | (1 << 5) | 1;  // 1980-01-01

std::uint64_t le(const std::vector<std::uint8_t>& b, std::uint64_t at, int width, const std::string& src) {
  if (at + static_cast<std::uint64_t>(width) > b.size()) throw DataError(src + ": truncated zip structure");
  std::uint64_t v = 0;
  for (int i = width - 1; i >= 0; --i) v = (v << 8) | b[at + static_cast<std::uint64_t>(i)];
  return v;
}

void put(std::vector<std::uint8_t>& out, std::uint64_t v, int width) {
  for (int i = 0; i < width; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

std::uint32_t crc_of(std::span<const std::uint8_t> d) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < d.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(d.size() - off, 1u << 30));
    crc = crc32(crc, d.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> deflate_raw(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw std::runtime_error("deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())));
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("deflate failed");
  out.resize(zs.total_out);
  return out;
}

std::vector<std::uint8_t> inflate_raw(const std::uint8_t* in, std::uint64_t n, std::uint64_t expected, const std::string& what) {
  std::vector<std::uint8_t> out(expected + 1);  // non-empty so zlib sees a valid buffer
  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw DataError(what + ": inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(in);
  zs.avail_in = static_cast<uInt>(n);
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  const auto produced = zs.total_out;
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || produced != expected) throw DataError(what + ": corrupt deflate stream");
  out.resize(expected);
  return out;
}

}  // namespace

AccessLog& AccessLog::global() {
  static AccessLog log;
  return log;
}

void AccessLog::record(const std::string& archive, const std::string& member) {
  std::lock_guard lock(mu_);
  entries_.push_back({archive, member});
}

std::vector<AccessLog::Entry> AccessLog::entries() const {
  std::lock_guard lock(mu_);
  return entries_;
}

void AccessLog::clear() {
  std::lock_guard lock(mu_);
  entries_.clear();
}

bool AccessLog::touched(const std::string& prefix) const {
  std::lock_guard lock(mu_);
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.member.starts_with(prefix); });
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  f.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> b(size);
  if (size && !f.read(reinterpret_cast<char*>(b.data()), static_cast<std::streamsize>(size))) {
    throw DataError("short read on '" + path + "'");
  }
  return b;
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + tmp + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

void write_text_file(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ZipArchive ZipArchive::open(const std::string& path) { return from_bytes(read_file(path), path); }

ZipArchive ZipArchive::from_bytes(std::vector<std::uint8_t> bytes, std::string label) {
  ZipArchive z;
  z.bytes_ = std::move(bytes);
  z.source_ = std::move(label);
  z.index();
  return z;
}

void ZipArchive::index() {
  const auto& b = bytes_;
  const auto& src = source_;
  if (b.size() < 22) throw DataError(src + ": not a zip archive (too short)");
  std::int64_t eocd = -1;
  const std::int64_t lowest = std::max<std::int64_t>(0, static_cast<std::int64_t>(b.size()) - 22 - 0xFFFF);
  for (auto at = static_cast<std::int64_t>(b.size()) - 22; at >= lowest; --at) {
    if (le(b, static_cast<std::uint64_t>(at), 4, src) == kEndSig) {
      eocd = at;
      break;
    }
  }
  if (eocd < 0) throw DataError(src + ": not a zip archive (no end-of-central-directory record)");
  const auto e = static_cast<std::uint64_t>(eocd);
  std::uint64_t count = le(b, e + 10, 2, src);
  std::uint64_t cd_offset = le(b, e + 16, 4, src);
  if (count == 0xFFFF || cd_offset == 0xFFFFFFFF) {
    if (e < 20 || le(b, e - 20, 4, src) != kZip64LocatorSig) throw DataError(src + ": zip64 locator missing");
    const auto z64 = le(b, e - 20 + 8, 8, src);
    if (le(b, z64, 4, src) != kZip64EndSig) throw DataError(src + ": bad zip64 end record");
    count = le(b, z64 + 32, 8, src);
    cd_offset = le(b, z64 + 48, 8, src);
  }
  std::uint64_t at = cd_offset;
  for (std::uint64_t i = 0; i < count; ++i) {
    if (le(b, at, 4, src) != kCentralSig) throw DataError(src + ": bad central directory entry");
    Member m;
    m.flags = static_cast<std::uint16_t>(le(b, at + 8, 2, src));
    m.method = static_cast<std::uint16_t>(le(b, at + 10, 2, src));
    m.crc = static_cast<std::uint32_t>(le(b, at + 16, 4, src));
    m.compressed = le(b, at + 20, 4, src);
    m.uncompressed = le(b, at + 24, 4, src);
    const auto nlen = le(b, at + 28, 2, src), xlen = le(b, at + 30, 2, src), clen = le(b, at + 32, 2, src);
    m.local_offset = le(b, at + 42, 4, src);
    if (at + 46 + nlen > b.size()) throw DataError(src + ": truncated central directory");
    std::string name(reinterpret_cast<const char*>(b.data() + at + 46), nlen);
    // zip64 extra: replaces whichever 32-bit fields are saturated, in order.
    for (std::uint64_t x = at + 46 + nlen; x + 4 <= at + 46 + nlen + xlen;) {
      const auto id = le(b, x, 2, src), sz = le(b, x + 2, 2, src);
      if (id == 0x0001) {
        std::uint64_t f = x + 4;
        if (m.uncompressed == 0xFFFFFFFF) { m.uncompressed = le(b, f, 8, src); f += 8; }
        if (m.compressed == 0xFFFFFFFF) { m.compressed = le(b, f, 8, src); f += 8; }
        if (m.local_offset == 0xFFFFFFFF) { m.local_offset = le(b, f, 8, src); }
      }
      x += 4 + sz;
    }
    index_[name] = m;
    order_.push_back(std::move(name));
    at += 46 + nlen + xlen + clen;
  }
}

std::vector<std::string> ZipArchive::names() const { return order_; }

std::vector<std::uint8_t> ZipArchive::read(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw DataError(source_ + ": no member '" + name + "'");
  const Member& m = it->second;
  const std::string what = source_ + ":" + name;
  if (m.flags & 0x1) throw DataError(what + ": encrypted members are not supported");
  if (le(bytes_, m.local_offset, 4, source_) != kLocalSig) throw DataError(what + ": bad local header");
  const auto data_at = m.local_offset + 30 + le(bytes_, m.local_offset + 26, 2, source_) + le(bytes_, m.local_offset + 28, 2, source_);
  if (data_at + m.compressed > bytes_.size()) throw DataError(what + ": truncated member data");
  std::vector<std::uint8_t> out;
  if (m.method == 0) {
    out.assign(bytes_.begin() + static_cast<std::ptrdiff_t>(data_at),
               bytes_.begin() + static_cast<std::ptrdiff_t>(data_at + m.compressed));
  } else if (m.method == 8) {
    out = inflate_raw(bytes_.data() + data_at, m.compressed, m.uncompressed, what);
  } else {
    throw DataError(what + ": unsupported compression method " + std::to_string(m.method));
  }
  if (crc_of(out) != m.crc) throw DataError(what + ": CRC mismatch");
  AccessLog::global().record(source_, name);
  return out;
}

void ZipWriter::add(const std::string& name, std::span<const std::uint8_t> data) {
  if (name.empty() || name.size() > 0xFFFF) throw std::invalid_argument("zip member name length out of range");
  if (data.size() >= 0xFFFFFFFFull) throw std::invalid_argument("zip member '" + name + "' exceeds 4 GiB");
  for (const auto& p : members_) {
    if (p.name == name) throw std::invalid_argument("duplicate zip member '" + name + "'");
  }
  Pending p{name, {}, 0, crc_of(data), data.size()};
  if (compress_) {
    p.stored = deflate_raw(data);
    p.method = 8;
  } else {
    p.stored.assign(data.begin(), data.end());
  }
  members_.push_back(std::move(p));
}

std::vector<std::uint8_t> ZipWriter::finish() const {
  std::vector<std::uint8_t> out;
  std::vector<std::uint64_t> offsets;
  for (const auto& p : members_) {
    offsets.push_back(out.size());
    put(out, kLocalSig, 4);
    put(out, 20, 2);
    put(out, 0, 2);
    put(out, p.method, 2);
    put(out, 0, 2);
    put(out, kDosDate, 2);
    put(out, p.crc, 4);
    put(out, p.stored.size(), 4);
    put(out, p.size, 4);
    put(out, p.name.size(), 2);
    put(out, 0, 2);
    out.insert(out.end(), p.name.begin(), p.name.end());
    out.insert(out.end(), p.stored.begin(), p.stored.end());
  }
  const auto cd_start = out.size();
  for (std::size_t i = 0; i < members_.size(); ++i) {
    const auto& p = members_[i];
    put(out, kCentralSig, 4);
    put(out, 20, 2);
    put(out, 20, 2);
    put(out, 0, 2);
    put(out, p.method, 2);
    put(out, 0, 2);
    put(out, kDosDate, 2);
    put(out, p.crc, 4);
    put(out, p.stored.size(), 4);
    put(out, p.size, 4);
    put(out, p.name.size(), 2);
    put(out, 0, 2);
    put(out, 0, 2);
    put(out, 0, 2);
    put(out, 0, 2);
    put(out, 0, 4);
    put(out, offsets[i], 4);
    out.insert(out.end(), p.name.begin(), p.name.end());
  }
  const auto cd_size = out.size() - cd_start;
  if (out.size() >= 0xFFFFFFFFull || members_.size() >= 0xFFFF) throw std::runtime_error("zip archive too large");
  put(out, kEndSig, 4);
  put(out, 0, 2);
  put(out, 0, 2);
  put(out, members_.size(), 2);
  put(out, members_.size(), 2);
  put(out, cd_size, 4);
  put(out, cd_start, 4);
  put(out, 0, 2);
  return out;
}

std::vector<std::uint8_t> write_npz(const Npz& npz, bool compress) {
  ZipWriter w(compress);
  for (const auto& [key, arr] : npz.arrays) w.add(key + ".npy", write_npy(arr));
  for (const auto& [name, text] : npz.texts) {
    w.add(name, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }
  return w.finish();
}

Npz read_npz(const ZipArchive& zip) {
  Npz out;
  for (const auto& name : zip.names()) {
    const auto bytes = zip.read(name);
    if (name.ends_with(".npy")) {
      out.arrays[name.substr(0, name.size() - 4)] = parse_npy(bytes);
    } else {
      out.texts[name] = std::string(bytes.begin(), bytes.end());
    }
  }
  return out;
}

NpyArray read_npz_array(const ZipArchive& zip, const std::string& key) {
  const std::string member = key + ".npy";
  if (!zip.contains(member)) throw DataError(zip.source() + ": missing array '" + key + "'");
  return parse_npy(zip.read(member));
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 failed");
  }
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 0xF];
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace nrf
