#include "badseg/bvtf.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace badseg {

namespace {

static_assert(std::endian::native == std::endian::little, "BVTF I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'B', 'V', 'T', 'F'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("BVTF: truncated header");
  return v;
}

}  // namespace

void write_bvtf(std::ostream& out, const Tensor& t) {
  if (t.ndim() > 255) throw std::invalid_argument("BVTF: too many dimensions");
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kBvtfVersion);
  put<std::uint8_t>(out, 0);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
  for (int d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!out) throw std::runtime_error("BVTF: write failed");
}

Tensor read_bvtf(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw std::runtime_error("BVTF: bad magic");
  const auto version = get<std::uint32_t>(in);
  if (version != kBvtfVersion) throw std::runtime_error("BVTF: unsupported version " + std::to_string(version));
  const auto dtype = get<std::uint8_t>(in);
  if (dtype != 0) throw std::runtime_error("BVTF: unsupported dtype " + std::to_string(dtype));
  const auto ndim = get<std::uint8_t>(in);
  std::vector<int> shape(ndim);
  for (auto& d : shape) d = static_cast<int>(get<std::uint32_t>(in));
  std::vector<float> data(shape_numel(shape));
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!in) throw std::runtime_error("BVTF: truncated payload");
  return Tensor(std::move(shape), std::move(data));
}

void write_bvtf(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_bvtf(out, t);
}

Tensor read_bvtf(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return read_bvtf(in);
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace badseg
