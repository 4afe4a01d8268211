#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ensforge/errors.hpp"

namespace ensforge {

/// Dense row-major tensor. Rasters (images, masks, probability maps) are
/// rank-2 tensors {H, W}; network weights use rank 1 or 4.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<std::size_t> dims, T fill = T(0)) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(product(dims_), fill);
  }

  BasicTensor(std::vector<std::size_t> dims, std::vector<T> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (product(dims_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match dims product " + std::to_string(product(dims_)));
    }
  }

  static BasicTensor raster(std::size_t rows, std::size_t cols, T fill = T(0)) {
    return BasicTensor({rows, cols}, fill);
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const { return dims_.at(0); }
  std::size_t cols() const { return dims_.at(1); }
  bool is_raster() const noexcept { return dims_.size() == 2; }
  bool is_square_raster() const noexcept { return is_raster() && dims_[0] == dims_[1]; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::size_t r, std::size_t c) noexcept { return data_[r * dims_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const noexcept { return data_[r * dims_[1] + c]; }

  bool same_shape(const BasicTensor& other) const noexcept { return dims_ == other.dims_; }

  bool all_finite() const noexcept {
    for (const T& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(dims_, std::move(out));
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  static std::size_t product(const std::vector<std::size_t>& d) {
    return std::accumulate(d.begin(), d.end(), std::size_t{1}, std::multiplies<>());
  }
  void check_dims() const {
    for (std::size_t d : dims_) {
      if (d == 0) throw DimensionError("tensor dims must be positive");
    }
  }

  std::vector<std::size_t> dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Per-pixel probability raster produced by one prediction pass (or a fusion).
using ProbMap = Tensor;

inline std::string shape_string(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace ensforge
