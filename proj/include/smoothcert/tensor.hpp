#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smoothcert/error.hpp"

namespace smoothcert {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Dense row-major array with an optional same-sized gradient buffer.
//
// Every dimension is positive, so an empty gradient vector unambiguously means
// "no gradient attached".
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* ptr() noexcept { return data_.data(); }
  const T* ptr() const noexcept { return data_.data(); }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  void ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
  }
  void zero_grad() { grad_.assign(data_.size(), T{0}); }
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  // Gradient as a tensor of the same shape (zeros when none is attached).
  BasicTensor grad_tensor() const {
    return has_grad() ? BasicTensor(shape_, grad_) : BasicTensor(shape_);
  }

  // Reinterprets the buffer; element count must be preserved.
  void reshape(Shape shape) {
    check_shape(shape);
    if (shape_numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(shape));
    }
    shape_ = std::move(shape);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const noexcept {
    for (const T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    for (const std::size_t d : shape) {
      if (d == 0) {
        throw ShapeError("tensor dimensions must be positive, got " +
                         shape_str(shape));
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
  std::vector<T> grad_;
};

using Tensor = BasicTensor<float>;

namespace detail {

// Sums in eight independent double lanes folded in a fixed order: the same
// result on every run, without a serial dependency chain.
template <typename T>
double lane_sum(const T* x, std::size_t n) {
  double lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += x[i + l];
  }
  double acc = 0.0;
  for (const double v : lanes) acc += v;
  for (; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
double lane_sq_dev(const T* x, std::size_t n, double mu) {
  double lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      const double d = x[i + l] - mu;
      lanes[l] += d * d;
    }
  }
  double acc = 0.0;
  for (const double v : lanes) acc += v;
  for (; i < n; ++i) acc += (x[i] - mu) * (x[i] - mu);
  return acc;
}

}  // namespace detail

}  // namespace smoothcert
