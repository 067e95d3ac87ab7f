#pragma once
// Zip container (stored and deflate entries, zip64 extensions on read) and
// the NPZ convention built on it: one NPY stream per "<key>.npy" entry.

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nrf/npy.hpp"

namespace nrf {

// Records every archive entry read, for audits of which data was touched.
class AccessLog {
 public:
  struct Entry {
    std::string archive;
    std::string member;
  };
  static AccessLog& global();
  void record(const std::string& archive, const std::string& member);
  std::vector<Entry> entries() const;
  void clear();
  // True if any recorded member of any archive starts with `prefix`.
  bool touched(const std::string& member_prefix) const;

 private:
  mutable std::mutex mu_;
  std::vector<Entry> entries_;
};

class ZipArchive {
 public:
  static ZipArchive open(const std::string& path);
  static ZipArchive from_bytes(std::vector<std::uint8_t> bytes, std::string label = "<memory>");

  std::vector<std::string> names() const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  // Decompressed member bytes; CRC-checked. Logged to AccessLog::global().
  std::vector<std::uint8_t> read(const std::string& name) const;
  const std::string& source() const noexcept { return source_; }

 private:
  struct Member {
    std::uint16_t method = 0;
    std::uint16_t flags = 0;
    std::uint32_t crc = 0;
    std::uint64_t compressed = 0;
    std::uint64_t uncompressed = 0;
    std::uint64_t local_offset = 0;
  };
  void index();
  std::vector<std::uint8_t> bytes_;
  std::string source_;
  std::map<std::string, Member> index_;
  std::vector<std::string> order_;
};

class ZipWriter {
 public:
  explicit ZipWriter(bool compress = false) : compress_(compress) {}
  void add(const std::string& name, std::span<const std::uint8_t> data);
  // Fixed timestamps, so identical content gives identical bytes.
  std::vector<std::uint8_t> finish() const;

 private:
  struct Pending {
    std::string name;
    std::vector<std::uint8_t> stored;
    std::uint16_t method;
    std::uint32_t crc;
    std::uint64_t size;
  };
  bool compress_;
  std::vector<Pending> members_;
};

// Ordered key -> array map plus optional raw text members (e.g. JSON).
struct Npz {
  std::map<std::string, NpyArray> arrays;
  std::map<std::string, std::string> texts;
};

std::vector<std::uint8_t> write_npz(const Npz& npz, bool compress = false);
// Loads every member. Keys lose their ".npy" suffix; other members go to texts.
Npz read_npz(const ZipArchive& zip);
// Loads one array by key.
NpyArray read_npz_array(const ZipArchive& zip, const std::string& key);

std::vector<std::uint8_t> read_file(const std::string& path);
// Writes via a temporary file and rename.
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::string& path, const std::string& text);

// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);

}  // namespace nrf
