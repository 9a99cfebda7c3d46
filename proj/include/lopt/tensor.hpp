#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lopt/errors.hpp"
#include "lopt/memory.hpp"

namespace lopt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Buffers go through the tracked allocator.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  using Storage = std::vector<Real, memory::TrackedAllocator<Real>>;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0)) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Tensor(Shape shape, std::initializer_list<Real> values) : shape_(std::move(shape)), data_(values) {
    check_size();
  }
  Tensor(Shape shape, std::span<const Real> values)
      : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    check_size();
  }

  static Tensor scalar(Real v) { return Tensor(Shape{}, {v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t bytes() const { return data_.size() * sizeof(Real); }

  /// Size of the trailing dimension (1 for scalars).
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Product of all but the trailing dimension.
  std::size_t rows() const { return shape_.empty() ? 1 : size() / cols(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::span<Real> values() { return {data_.data(), data_.size()}; }
  std::span<const Real> values() const { return {data_.data(), data_.size()}; }

  Real& operator[](std::size_t i) { return data_[i]; }
  const Real& operator[](std::size_t i) const { return data_[i]; }

  Real item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size()) throw ShapeError("reshape " + shape_string(shape_) + " -> " + shape_string(shape));
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  bool all_finite() const {
    for (Real v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Bitwise equality of shape and contents.
  bool identical(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::equal(data_.begin(), data_.end(), other.data_.begin(), other.data_.end(),
                      [](Real a, Real b) { return std::memcmp(&a, &b, sizeof(Real)) == 0; });
  }

 private:
  void check_size() const {
    if (numel(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
  }

  Shape shape_;
  Storage data_;
};

/// Squared L2 norm accumulated in extended precision.
template <typename Real>
long double squared_norm(std::span<const Real> v) {
  long double s = 0;
  for (Real x : v) s += static_cast<long double>(x) * x;
  return s;
}

template <typename Real>
double l2_norm(const Tensor<Real>& t) {
  return static_cast<double>(std::sqrt(squared_norm(t.values())));
}

}  // namespace lopt
