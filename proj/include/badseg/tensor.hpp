#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace badseg {

/// Raised when an operation produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major float tensor. Owns its storage; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor scalar(float v) { return Tensor({1}, std::vector<float>{v}); }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int ndim() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  const std::vector<float>& vec() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  // 2-D and 3-D element access (no bounds checks beyond debug asserts)
  float& at(int i, int j) noexcept { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  float at(int i, int j) const noexcept { return data_[static_cast<std::size_t>(i) * shape_[1] + j]; }
  float& at(int c, int i, int j) noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
  }
  float at(int c, int i, int j) const noexcept {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + i) * shape_[2] + j];
  }

  Tensor reshaped(std::vector<int> shape) const;
  void fill(float v);
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

  /// Bitwise equality of shape and payload.
  bool operator==(const Tensor& other) const noexcept;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);
std::string shape_string(const std::vector<int>& shape);

/// Throws NonFiniteError naming `what` if any element is NaN/Inf.
void require_finite(const Tensor& t, std::string_view what);
bool all_finite(std::span<const float> values) noexcept;

double sum(const Tensor& t);
double dot(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace badseg
