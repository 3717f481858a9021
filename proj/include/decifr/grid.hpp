#pragma once

#include <cstdint>
#include <vector>

#include "decifr/common.hpp"

namespace decifr {

// Dense row-major 2D grid. Used for layout masks (uint8_t in {0,1}) and
// rendered images (double in [0,255] or [0,1]).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, T fill = T{})
      : h_(height), w_(width), data_(static_cast<size_t>(height) * width, fill) {}

  int height() const { return h_; }
  int width() const { return w_; }
  size_t size() const { return data_.size(); }

  T& at(int y, int x) { return data_[static_cast<size_t>(y) * w_ + x]; }
  const T& at(int y, int x) const { return data_[static_cast<size_t>(y) * w_ + x]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  bool same_shape(const Grid& o) const { return h_ == o.h_ && w_ == o.w_; }

  bool operator==(const Grid& o) const {
    return h_ == o.h_ && w_ == o.w_ && data_ == o.data_;
  }

  template <typename U, typename F>
  Grid<U> map(F&& f) const {
    Grid<U> out(h_, w_);
    for (size_t i = 0; i < data_.size(); ++i) out.raw()[i] = f(data_[i]);
    return out;
  }

 private:
  int h_ = 0;
  int w_ = 0;
  std::vector<T> data_;
};

using MaskGrid = Grid<uint8_t>;
using ImageGrid = Grid<double>;

inline double foreground_fraction(const MaskGrid& m) {
  if (m.size() == 0) return 0.0;
  size_t on = 0;
  for (uint8_t v : m.raw()) on += (v != 0);
  return static_cast<double>(on) / static_cast<double>(m.size());
}

}  // namespace decifr
