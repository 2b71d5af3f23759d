#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "badseg/signal.hpp"

namespace badseg {

std::vector<double> gaussian_kernel(int kernel_size, double sigma) {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw std::invalid_argument("gaussian kernel size must be a positive odd integer, got " +
                                std::to_string(kernel_size));
  }
  if (sigma <= 0.0) sigma = kernel_size / 6.0;
  const int r = kernel_size / 2;
  std::vector<double> k(static_cast<std::size_t>(kernel_size));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    s += v;
  }
  for (double& v : k) v /= s;
  return k;
}

Tensor gaussian_smooth(const Tensor& field, int kernel_size, std::optional<double> sigma) {
  if (field.ndim() != 2) throw std::invalid_argument("gaussian_smooth expects an [H,W] field");
  if (sigma && !(*sigma > 0.0)) throw std::invalid_argument("gaussian_smooth: sigma must be positive");
  const std::vector<double> k = gaussian_kernel(kernel_size, sigma.value_or(0.0));
  const int h = field.dim(0), w = field.dim(1), r = kernel_size / 2;
  Tensor tmp({h, w}), out({h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double s = 0.0;
      for (int t = -r; t <= r; ++t) s += k[static_cast<std::size_t>(t + r)] * field.at(i, std::clamp(j + t, 0, w - 1));
      tmp.at(i, j) = static_cast<float>(s);
    }
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      double s = 0.0;
      for (int t = -r; t <= r; ++t) s += k[static_cast<std::size_t>(t + r)] * tmp.at(std::clamp(i + t, 0, h - 1), j);
      out.at(i, j) = static_cast<float>(s);
    }
  return out;
}

Frame bilinear_warp(const Frame& image, const Tensor& displacement) {
  if (displacement.ndim() != 3 || displacement.dim(0) != image.height || displacement.dim(1) != image.width ||
      displacement.dim(2) != 2) {
    throw std::invalid_argument("bilinear_warp: displacement " + shape_string(displacement.shape()) +
                                " does not match frame " + std::to_string(image.height) + "x" +
                                std::to_string(image.width));
  }
  require_finite(displacement, "bilinear_warp displacement");
  const int h = image.height, w = image.width;
  Frame out(h, w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const std::size_t base = (static_cast<std::size_t>(i) * w + j) * 2;
      const float y = std::clamp(static_cast<float>(i) + displacement[base], 0.0f, static_cast<float>(h - 1));
      const float x = std::clamp(static_cast<float>(j) + displacement[base + 1], 0.0f, static_cast<float>(w - 1));
      const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const float fy = y - y0, fx = x - x0;
      for (int c = 0; c < 3; ++c) {
        const float top = image.at(y0, x0, c) * (1.0f - fx) + image.at(y0, x1, c) * fx;
        const float bot = image.at(y1, x0, c) * (1.0f - fx) + image.at(y1, x1, c) * fx;
        out.at(i, j, c) = std::clamp(top * (1.0f - fy) + bot * fy, 0.0f, 1.0f);
      }
    }
  return out;
}

}  // namespace badseg
