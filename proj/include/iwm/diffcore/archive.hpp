#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "iwm/binary_io.hpp"
#include "iwm/diffcore/tensor.hpp"

namespace iwm {

struct ArchiveEntry {
  DType dtype = DType::f64;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

struct ArchiveMetadata {
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::map<std::string, std::string> extra;
};

/// Flat name -> (dtype, shape, little-endian raw values) archive with a
/// metadata record. Layout:
///
///   "IWMARCH1" u32 version
///   u64 config_hash  u64 seed  i64 step
///   u32 n_extra  { str key  str value }
///   u32 n_entries { str name  u8 dtype  u32 rank  u64 dims[rank]  u64 nbytes  bytes }
///   "IWMAEND\0"
///
/// Strings are u32 length + bytes. Entries are written in name order, so two
/// equal archives serialize to identical files.
class Archive {
 public:
  static constexpr std::uint32_t kVersion = 1;

  ArchiveMetadata metadata;

  void put(const std::string& name, ArchiveEntry entry) { entries_[name] = std::move(entry); }

  template <typename T>
  void put_values(const std::string& name, const Shape& shape, const T* data) {
    ArchiveEntry e{dtype_of<T>(), shape, {}};
    e.bytes.resize(static_cast<std::size_t>(numel(shape)) * sizeof(T));
    std::memcpy(e.bytes.data(), data, e.bytes.size());
    put(name, std::move(e));
  }

  template <typename S>
  void put_tensor(const std::string& name, const Tensor<S>& t) {
    put_values(name, t.shape(), t.values().data());
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const ArchiveEntry& at(const std::string& name) const;
  const std::map<std::string, ArchiveEntry>& entries() const { return entries_; }

  /// Copies the entry into `out`, requiring matching dtype and shape.
  template <typename T>
  void get_values(const std::string& name, const Shape& shape, T* out) const {
    const ArchiveEntry& e = at(name);
    if (e.dtype != dtype_of<T>()) throw CheckpointError("dtype_mismatch", "entry " + name + " has a different dtype");
    if (e.shape != shape) {
      throw CheckpointError("shape_mismatch", "entry " + name + " is " + to_string(e.shape) + ", expected " + to_string(shape));
    }
    std::memcpy(out, e.bytes.data(), e.bytes.size());
  }

  template <typename S>
  void load_into(const std::string& name, Tensor<S>& t) const {
    get_values(name, t.shape(), t.mutable_values().data());
  }

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::map<std::string, ArchiveEntry> entries_;
};

}  // namespace iwm
