#include "badseg/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>

namespace badseg {

Frame::Frame(int h, int w, float fill)
    : height(h), width(w), rgb(static_cast<std::size_t>(h) * w * 3, fill) {
  if (h < 1 || w < 1) throw std::invalid_argument("frame dimensions must be positive");
}

Mask::Mask(int h, int w, std::uint8_t fill)
    : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {
  if (h < 1 || w < 1) throw std::invalid_argument("mask dimensions must be positive");
}

std::size_t Mask::foreground() const noexcept {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto v) { return v != 0; }));
}

Mask binary_mask(const Mask& m, int object) {
  Mask out(m.height, m.width);
  for (std::size_t i = 0; i < m.labels.size(); ++i) {
    const bool on = object == 0 ? m.labels[i] != 0 : m.labels[i] == object;
    out.labels[i] = on ? 1 : 0;
  }
  return out;
}

Tensor frame_to_chw(const Frame& f) {
  Tensor t({3, f.height, f.width});
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < f.height; ++i)
      for (int j = 0; j < f.width; ++j) t.at(c, i, j) = f.at(i, j, c);
  return t;
}

Tensor mask_to_tensor(const Mask& m) {
  Tensor t({1, m.height, m.width});
  for (std::size_t i = 0; i < m.labels.size(); ++i) t[i] = m.labels[i] != 0 ? 1.0f : 0.0f;
  return t;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct RawImage {
  int height = 0, width = 0, channels = 0;
  std::vector<std::uint8_t> data;
};

RawImage read_png(const std::filesystem::path& path, bool keep_gray) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open PNG file " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng initialisation failed");
  }
  RawImage img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("malformed PNG file " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (!keep_gray && (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  img.data.resize(stride * img.height);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  for (int i = 0; i < img.height; ++i) rows[static_cast<std::size_t>(i)] = img.data.data() + stride * i;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_raw(const std::filesystem::path& path, int h, int w, int color_type, int channels,
               const std::vector<std::uint8_t>& data, const PngText& text = {}) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot write PNG file " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("failed writing PNG file " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> chunks;
  for (const auto& [k, v] : text) {
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = const_cast<char*>(k.c_str());
    t.text = const_cast<char*>(v.c_str());
    t.text_length = v.size();
    chunks.push_back(t);
  }
  if (!chunks.empty()) png_set_text(png, info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(png, info);
  for (int i = 0; i < h; ++i) {
    png_write_row(png, const_cast<png_bytep>(data.data() + static_cast<std::size_t>(i) * w * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

Frame read_png_frame(const std::filesystem::path& path) {
  RawImage raw = read_png(path, false);
  Frame f(raw.height, raw.width);
  for (int i = 0; i < raw.height; ++i)
    for (int j = 0; j < raw.width; ++j)
      for (int c = 0; c < 3; ++c)
        f.at(i, j, c) = raw.data[(static_cast<std::size_t>(i) * raw.width + j) * raw.channels + c] / 255.0f;
  return f;
}

Mask read_png_mask(const std::filesystem::path& path) {
  RawImage raw = read_png(path, true);
  Mask m(raw.height, raw.width);
  for (std::size_t p = 0; p < m.labels.size(); ++p) m.labels[p] = raw.data[p * raw.channels];
  return m;
}

RgbaImage read_png_rgba(const std::filesystem::path& path) {
  RawImage raw = read_png(path, false);
  RgbaImage img{raw.height, raw.width, std::vector<float>(static_cast<std::size_t>(raw.height) * raw.width * 4)};
  for (std::size_t p = 0; p < static_cast<std::size_t>(raw.height) * raw.width; ++p) {
    for (int c = 0; c < 3; ++c) img.rgba[p * 4 + c] = raw.data[p * raw.channels + c] / 255.0f;
    img.rgba[p * 4 + 3] = raw.channels == 4 ? raw.data[p * 4 + 3] / 255.0f : 1.0f;
  }
  return img;
}

void write_png(const std::filesystem::path& path, const Frame& frame, const PngText& text) {
  std::vector<std::uint8_t> data(frame.rgb.size());
  std::transform(frame.rgb.begin(), frame.rgb.end(), data.begin(), to_byte);
  write_raw(path, frame.height, frame.width, PNG_COLOR_TYPE_RGB, 3, data, text);
}

void write_png(const std::filesystem::path& path, const Mask& mask) {
  write_raw(path, mask.height, mask.width, PNG_COLOR_TYPE_GRAY, 1, mask.labels);
}

void write_png(const std::filesystem::path& path, const RgbaImage& image) {
  std::vector<std::uint8_t> data(image.rgba.size());
  std::transform(image.rgba.begin(), image.rgba.end(), data.begin(), to_byte);
  write_raw(path, image.height, image.width, PNG_COLOR_TYPE_RGB_ALPHA, 4, data);
}

}  // namespace badseg
