#pragma once

// Little-endian binary stream helpers shared by the cage and checkpoint formats.

#include "d3ga/common.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

namespace d3ga::bin {

template <typename T>
T to_little(T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("unexpected end of binary stream");
  return to_little(v);
}

inline void put_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::istream& in, void* data, std::size_t n) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("unexpected end of binary stream");
}

inline void put_magic(std::ostream& out, const char (&magic)[5]) { put_bytes(out, magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char buf[4];
  get_bytes(in, buf, 4);
  if (std::memcmp(buf, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + magic);
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  put_bytes(out, s.data(), s.size());
}

inline std::string get_string(std::istream& in, std::size_t max_len = 1u << 20) {
  const auto n = get<std::uint32_t>(in);
  if (n > max_len) throw FormatError("string length out of range");
  std::string s(n, '\0');
  get_bytes(in, s.data(), n);
  return s;
}

} // namespace d3ga::bin
