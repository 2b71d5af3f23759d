#pragma once

#include <filesystem>
#include <iosfwd>

#include "badseg/tensor.hpp"

// BVTF tensor files: "BVTF", u32 version (1), u8 dtype (0 = f32), u8 ndim,
// ndim × u32 dims, row-major f32 payload. All integers little-endian.
namespace badseg {

inline constexpr std::uint32_t kBvtfVersion = 1;

void write_bvtf(std::ostream& out, const Tensor& t);
Tensor read_bvtf(std::istream& in);
void write_bvtf(const std::filesystem::path& path, const Tensor& t);
Tensor read_bvtf(const std::filesystem::path& path);

}  // namespace badseg
