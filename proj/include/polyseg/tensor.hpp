#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "polyseg/error.hpp"

namespace polyseg {

/// Channel-major (C, D, H, W) array of doubles.
class Tensor {
 public:
  using Shape = std::array<std::size_t, 4>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(shape), data_(shape[0] * shape[1] * shape[2] * shape[3], fill) {
    for (auto s : shape_) detail::require(s > 0, "tensor extents must be positive");
  }
  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    for (auto s : shape_) detail::require(s > 0, "tensor extents must be positive");
    detail::require(data_.size() == shape[0] * shape[1] * shape[2] * shape[3],
                    "tensor data length does not match shape");
  }

  const Shape& shape() const { return shape_; }
  std::size_t channels() const { return shape_[0]; }
  std::size_t depth() const { return shape_[1]; }
  std::size_t height() const { return shape_[2]; }
  std::size_t width() const { return shape_[3]; }
  std::size_t voxels() const { return shape_[1] * shape_[2] * shape_[3]; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* ptr() { return data_.data(); }
  const double* ptr() const { return data_.data(); }

  std::span<double> channel(std::size_t c) { return {data_.data() + c * voxels(), voxels()}; }
  std::span<const double> channel(std::size_t c) const {
    return {data_.data() + c * voxels(), voxels()};
  }

  double& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }
  double at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
    return data_[((c * shape_[1] + z) * shape_[2] + y) * shape_[3] + x];
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

inline std::string shape_string(const Tensor::Shape& s) {
  return "(" + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," + std::to_string(s[2]) +
         "," + std::to_string(s[3]) + ")";
}

}  // namespace polyseg
