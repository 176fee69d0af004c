#include "vrwkv/tensor.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <istream>
#include <ostream>

namespace vrwkv {

namespace {

// Guards against absurd headers from corrupt files.
constexpr std::uint64_t kMaxRank = 16;

void put_u64(std::ostream& out, std::uint64_t v) {
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes.data(), bytes.size());
}

std::uint64_t get_u64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!in) throw IoError("tensor: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void write_tensor(std::ostream& out, const Tensor& t) {
  put_u64(out, t.rank());
  for (auto e : t.shape()) put_u64(out, e);
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  if (!out) throw IoError("tensor: write failed");
}

Tensor read_tensor(std::istream& in) {
  const std::uint64_t rank = get_u64(in);
  if (rank > kMaxRank) throw IoError("tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = get_u64(in);
  std::vector<double> data(shape_size(shape));
  for (auto& v : data) v = std::bit_cast<double>(get_u64(in));
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("tensor: cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("tensor: cannot open " + path.string());
  return read_tensor(in);
}

std::size_t serialized_size(const Tensor& t) { return 8 * (1 + t.rank() + t.size()); }

}  // namespace vrwkv
