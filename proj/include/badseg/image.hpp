#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "badseg/tensor.hpp"

namespace badseg {

/// H×W×3 RGB image, channel values in [0,1], interleaved row-major.
struct Frame {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Frame() = default;
  Frame(int h, int w, float fill = 0.0f);

  float& at(int i, int j, int c) noexcept { return rgb[(static_cast<std::size_t>(i) * width + j) * 3 + c]; }
  float at(int i, int j, int c) const noexcept {
    return rgb[(static_cast<std::size_t>(i) * width + j) * 3 + c];
  }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const Frame& o) const noexcept { return height == o.height && width == o.width; }
  bool operator==(const Frame& o) const = default;
};

/// H×W label grid: 0 is background, positive values are object indices.
struct Mask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  Mask() = default;
  Mask(int h, int w, std::uint8_t fill = 0);

  std::uint8_t& at(int i, int j) noexcept { return labels[static_cast<std::size_t>(i) * width + j]; }
  std::uint8_t at(int i, int j) const noexcept { return labels[static_cast<std::size_t>(i) * width + j]; }
  std::size_t pixels() const noexcept { return static_cast<std::size_t>(height) * width; }
  std::size_t foreground() const noexcept;
  bool same_shape(const Mask& o) const noexcept { return height == o.height && width == o.width; }
  bool operator==(const Mask& o) const = default;
};

/// RGBA sprite used by physical-object triggers; alpha in [0,1].
struct RgbaImage {
  int height = 0;
  int width = 0;
  std::vector<float> rgba;

  float at(int i, int j, int c) const noexcept {
    return rgba[(static_cast<std::size_t>(i) * width + j) * 4 + c];
  }
  bool operator==(const RgbaImage& o) const = default;
};

/// Binary view of one object: 1 where labels == object (or > 0 when object is 0).
Mask binary_mask(const Mask& m, int object = 0);

/// [3,H,W] channel-major tensor.
Tensor frame_to_chw(const Frame& f);
/// [1,H,W] float tensor of a binary mask.
Tensor mask_to_tensor(const Mask& m);

Frame read_png_frame(const std::filesystem::path& path);
Mask read_png_mask(const std::filesystem::path& path);
RgbaImage read_png_rgba(const std::filesystem::path& path);
/// tEXt chunks (keyword, text) written before the image data.
using PngText = std::vector<std::pair<std::string, std::string>>;

void write_png(const std::filesystem::path& path, const Frame& frame, const PngText& text = {});
void write_png(const std::filesystem::path& path, const Mask& mask);
void write_png(const std::filesystem::path& path, const RgbaImage& image);

}  // namespace badseg
