#pragma once

#include <complex>
#include <optional>
#include <vector>

#include "badseg/image.hpp"
#include "badseg/tensor.hpp"

namespace badseg {

/// Row-major H×W grid of complex samples.
struct ComplexGrid {
  int height = 0;
  int width = 0;
  std::vector<std::complex<double>> data;

  ComplexGrid() = default;
  ComplexGrid(int h, int w);
  std::complex<double>& at(int i, int j) { return data[static_cast<std::size_t>(i) * width + j]; }
  const std::complex<double>& at(int i, int j) const { return data[static_cast<std::size_t>(i) * width + j]; }
};

/// Unnormalized forward 2-D DFT (any H, W ≥ 1).
ComplexGrid fft2(const ComplexGrid& x);
/// Inverse 2-D DFT scaled by 1/(HW).
ComplexGrid ifft2(const ComplexGrid& x);

/// Normalized 1-D Gaussian weights; sigma ≤ 0 selects kernel_size/6.
std::vector<double> gaussian_kernel(int kernel_size, double sigma = 0.0);

/// Separable Gaussian blur of an [H,W] field with edge replication.
Tensor gaussian_smooth(const Tensor& field, int kernel_size, std::optional<double> sigma = std::nullopt);

/// out(i,j) = bilinear sample of `image` at (i + d(i,j,0), j + d(i,j,1)), clamped to the border.
/// `displacement` is [H,W,2] in pixels.
Frame bilinear_warp(const Frame& image, const Tensor& displacement);

}  // namespace badseg
