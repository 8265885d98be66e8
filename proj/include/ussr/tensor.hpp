#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ussr {

/// Base failure type for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    if (numel(shape_) != data_.size()) {
      throw Error("tensor shape " + shape_str(shape_) + " does not match " +
                  std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  static Tensor row(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }

  static Tensor column(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n, 1}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  /// Leading extent of a rank-2 tensor.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  /// Trailing extent; for rank-1 tensors the length.
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const {
    return data_[r * shape_.back() + c];
  }

  std::vector<double> row_values(std::size_t r) const {
    const std::size_t c = cols();
    return {data_.begin() + static_cast<std::ptrdiff_t>(r * c),
            data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)};
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

 private:
  void check_shape() const {
    if (shape_.empty()) throw Error("tensor shape must have at least one axis");
    for (std::size_t d : shape_) {
      if (d == 0) throw Error("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

/// Same shape and identical bit patterns in every element.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

/// Sum whose result does not depend on the order of the terms.
inline double ordered_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace ussr
