#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "decifr/common.hpp"

namespace decifr::ad {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Contiguous row-major double tensor. Value type; the autodiff graph wraps
// it in Node.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}
  Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw InvalidInput("tensor data size does not match shape");
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool is_scalar() const { return numel() == 1; }
  double scalar() const {
    if (!is_scalar()) throw InvalidInput("tensor is not a scalar");
    return data[0];
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar_of(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline double dot_raw(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(const std::vector<double>& a) {
  return std::sqrt(dot_raw(a, a));
}

}  // namespace decifr::ad
