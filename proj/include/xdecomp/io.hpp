#pragma once

// Byte-level helpers shared by the XDV1/XDT1/XDC1 writers: explicit
// little-endian framing (independent of host endianness), content hashing
// for run manifests, and whole-file slurp/spill.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace xdecomp::io {

template <typename T>
T byteswap_integral(T v) {
  static_assert(std::is_integral_v<T>);
  T out;
  auto* src = reinterpret_cast<const unsigned char*>(&v);
  auto* dst = reinterpret_cast<unsigned char*>(&out);
  for (std::size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
  return out;
}

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = byteswap_integral(v);
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if constexpr (std::endian::native == std::endian::big) v = byteswap_integral(v);
  return v;
}

inline void write_f32_le(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  write_u32_le(os, v);
}

inline float read_f32_le(std::istream& is) {
  const std::uint32_t v = read_u32_le(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

void write_f32_block_le(std::ostream& os, const float* data, std::size_t count);
void read_f32_block_le(std::istream& is, float* data, std::size_t count);

// 64-bit FNV-1a, used for input hashes in run manifests.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t hash_file(const std::filesystem::path& path);
std::string hash_hex(std::uint64_t h);

std::vector<char> slurp(const std::filesystem::path& path);
void spill(const std::filesystem::path& path, const void* data, std::size_t size);
void spill(const std::filesystem::path& path, const std::string& text);

}  // namespace xdecomp::io
