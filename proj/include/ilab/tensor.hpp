// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ilab/errors.hpp"

namespace ilab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array of doubles. Rank 0 is a scalar (one value).
class Tensor {
 public:
  Tensor() : values_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
    for (std::size_t d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
  }

  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    for (std::size_t d : shape_)
      if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape_));
    if (values_.size() != shape_size(shape_))
      throw DimensionError("value count " + std::to_string(values_.size()) + " does not match shape " +
                           shape_string(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, std::vector<double>(t.size(), 0.0)); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }

  // Matrix view: rank-1 tensors are treated as a single row, scalars as 1x1.
  std::size_t rows() const {
    if (shape_.size() < 2) return 1;
    return shape_size(shape_) / shape_.back();
  }
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols(), cols()}; }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(values_.begin(), values_.end(), v); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<double> values_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Cosine similarity with the denominator clamped at `eps`.
inline double cosine(std::span<const double> a, std::span<const double> b, double eps = 1e-12) {
  const double na = std::max(l2_norm(a), eps);
  const double nb = std::max(l2_norm(b), eps);
  return dot(a, b) / (na * nb);
}

/// FNV-1a over the raw value bytes and shape. Used to assert that frozen
/// weights are bitwise unchanged.
inline std::uint64_t hash_tensor(const Tensor& t, std::uint64_t h = 1469598103934665603ULL) {
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t d : t.shape()) mix(reinterpret_cast<const unsigned char*>(&d), sizeof d);
  mix(reinterpret_cast<const unsigned char*>(t.data()), t.size() * sizeof(double));
  return h;
}

}  // namespace ilab
