#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "iwm/error.hpp"

namespace iwm {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Element type tags shared by the checkpoint and corpus formats.
enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
  }
  return 0;
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else {
    static_assert(std::is_same_v<T, std::uint8_t>);
    return DType::u8;
  }
}

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}

  template <typename T>
  void pod(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& out_;
};

/// Reads little-endian records; any short read throws a DatasetError-style
/// error of kind `truncated` via the supplied factory.
template <typename ErrorT>
class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}

  template <typename T>
  T pod() {
    T v{};
    read(&v, sizeof(T));
    return v;
  }
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw ErrorT("truncated", what_ + " ended early");
  }
  std::string str(std::uint32_t max_len = 1u << 20) {
    const auto n = pod<std::uint32_t>();
    if (n > max_len) throw ErrorT("corrupt", what_ + " has an implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void expect_magic(const char (&magic)[9]) {
    char buf[8];
    read(buf, 8);
    if (std::memcmp(buf, magic, 8) != 0) throw ErrorT("bad_magic", what_ + " does not start with " + std::string(magic, 8));
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
  std::string what_;
};

}  // namespace iwm
