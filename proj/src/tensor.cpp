#include "xdecomp/tensor.hpp"

#include <cstdio>
#include <fstream>

#include "xdecomp/io.hpp"

namespace xdecomp {

namespace {
constexpr char kMagic[4] = {'X', 'D', 'T', '1'};
}

void write_xdt1(std::ostream& os, const Tensor& t) {
  if (t.empty()) throw std::invalid_argument("cannot write empty tensor");
  os.write(kMagic, 4);
  io::write_u32_le(os, std::uint32_t(t.rank()));
  for (int d : t.shape()) io::write_u32_le(os, std::uint32_t(d));
  io::write_f32_block_le(os, t.data(), std::size_t(t.numel()));
  if (!os) throw std::runtime_error("XDT1 write failed");
}

Tensor read_xdt1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kMagic, 4))
    throw std::runtime_error("not an XDT1 stream (bad magic)");
  const std::uint32_t rank = io::read_u32_le(is);
  if (rank < 1 || rank > 4) throw std::runtime_error("XDT1 rank out of range");
  std::vector<int> shape(rank);
  for (auto& d : shape) {
    d = int(io::read_u32_le(is));
    if (d <= 0) throw std::runtime_error("XDT1 dim out of range");
  }
  Tensor t(shape);
  io::read_f32_block_le(is, t.data(), std::size_t(t.numel()));
  if (!is) throw std::runtime_error("XDT1 payload truncated");
  return t;
}

void save_xdt1(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  write_xdt1(os, t);
}

Tensor load_xdt1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  return read_xdt1(is);
}

namespace io {

void write_f32_block_le(std::ostream& os, const float* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), std::streamsize(count * 4));
  } else {
    for (std::size_t i = 0; i < count; ++i) write_f32_le(os, data[i]);
  }
}

void read_f32_block_le(std::istream& is, float* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(data), std::streamsize(count * 4));
  } else {
    for (std::size_t i = 0; i < count; ++i) data[i] = read_f32_le(is);
  }
}

std::uint64_t hash_file(const std::filesystem::path& path) {
  const auto bytes = slurp(path);
  return fnv1a(bytes.data(), bytes.size());
}

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::vector<char> slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  const auto size = is.tellg();
  is.seekg(0);
  std::vector<char> bytes(static_cast<std::size_t>(size), '\0');
  is.read(bytes.data(), size);
  if (!is) throw std::runtime_error("read failed: " + path.string());
  return bytes;
}

void spill(const std::filesystem::path& path, const void* data, std::size_t size) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(static_cast<const char*>(data), std::streamsize(size));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void spill(const std::filesystem::path& path, const std::string& text) {
  spill(path, text.data(), text.size());
}

}  // namespace io
}  // namespace xdecomp
