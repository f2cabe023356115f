#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dseg/errors.hpp"

namespace dseg {

struct Shape {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t plane() const { return height * width; }
  std::size_t size() const { return channels * height * width; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" +
           std::to_string(width);
  }
};

// Dense channel-stacked real field, row-major within each channel plane.
class ValueGrid {
 public:
  ValueGrid() = default;
  ValueGrid(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0)
      : shape_{channels, height, width}, data_(shape_.size(), fill) {}
  ValueGrid(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
  ValueGrid(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw ShapeError("ValueGrid: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  static ValueGrid scalar(double v) { return ValueGrid(1, 1, 1, v); }

  const Shape& shape() const { return shape_; }
  std::size_t channels() const { return shape_.channels; }
  std::size_t height() const { return shape_.height; }
  std::size_t width() const { return shape_.width; }
  std::size_t plane() const { return shape_.plane(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_.height + y) * shape_.width + x];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> channel(std::size_t c) { return {data_.data() + c * plane(), plane()}; }
  std::span<const double> channel(std::size_t c) const {
    return {data_.data() + c * plane(), plane()};
  }
  const std::vector<double>& values() const { return data_; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("ValueGrid::item on non-scalar grid " + shape_.str());
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const ValueGrid&) const = default;

 private:
  Shape shape_{};
  std::vector<double> data_;
};

// H x W field of {0,1} labels.
class BinaryGrid {
 public:
  BinaryGrid() = default;
  BinaryGrid(std::size_t height, std::size_t width, std::uint8_t fill = 0)
      : height_(height), width_(width), data_(height * width, fill ? 1 : 0) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return data_.size(); }

  std::uint8_t operator[](std::size_t i) const { return data_[i]; }
  void set(std::size_t i, bool v) { data_[i] = v ? 1 : 0; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data_[y * width_ + x]; }
  void set(std::size_t y, std::size_t x, bool v) { data_[y * width_ + x] = v ? 1 : 0; }

  std::span<const std::uint8_t> data() const { return data_; }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
  }
  bool same_shape(const BinaryGrid& o) const { return height_ == o.height_ && width_ == o.width_; }
  bool operator==(const BinaryGrid&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> data_;
};

inline BinaryGrid threshold(const ValueGrid& g, double t = 0.5) {
  if (g.channels() != 1) throw ShapeError("threshold expects a single-channel grid");
  BinaryGrid out(g.height(), g.width());
  for (std::size_t i = 0; i < g.size(); ++i) out.set(i, g[i] >= t);
  return out;
}

inline ValueGrid to_values(const BinaryGrid& b) {
  ValueGrid out(1, b.height(), b.width());
  for (std::size_t i = 0; i < b.size(); ++i) out[i] = b[i];
  return out;
}

inline BinaryGrid operator&(const BinaryGrid& a, const BinaryGrid& b) {
  if (!a.same_shape(b)) throw ShapeError("mask intersection: shape mismatch");
  BinaryGrid out(a.height(), a.width());
  for (std::size_t i = 0; i < a.size(); ++i) out.set(i, a[i] && b[i]);
  return out;
}

inline void require_same_plane(const BinaryGrid& b, std::size_t h, std::size_t w, const char* what) {
  if (b.height() != h || b.width() != w)
    throw ShapeError(std::string(what) + ": expected " + std::to_string(h) + "x" +
                     std::to_string(w) + ", got " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
}

// Dihedral transforms used by augmentation. `k` quarter turns (counter-clockwise)
// followed by an optional horizontal flip. Rotations by 90/270 require a square plane.
struct Dihedral {
  int quarter_turns = 0;
  bool flip = false;

  // Source coordinate for destination pixel (y, x) on an n x n plane.
  std::pair<std::size_t, std::size_t> source(std::size_t y, std::size_t x, std::size_t h,
                                             std::size_t w) const {
    if (flip) x = w - 1 - x;
    for (int t = 0; t < quarter_turns; ++t) {
      // inverse of a ccw quarter turn
      std::size_t ny = x, nx = h - 1 - y;
      y = ny;
      x = nx;
    }
    return {y, x};
  }

  bool identity() const { return quarter_turns == 0 && !flip; }
};

inline ValueGrid apply(const Dihedral& d, const ValueGrid& g) {
  if (d.identity()) return g;
  if (d.quarter_turns % 2 != 0 && g.height() != g.width())
    throw ShapeError("quarter-turn rotation requires a square grid");
  ValueGrid out(g.shape());
  for (std::size_t c = 0; c < g.channels(); ++c)
    for (std::size_t y = 0; y < g.height(); ++y)
      for (std::size_t x = 0; x < g.width(); ++x) {
        auto [sy, sx] = d.source(y, x, g.height(), g.width());
        out.at(c, y, x) = g.at(c, sy, sx);
      }
  return out;
}

inline BinaryGrid apply(const Dihedral& d, const BinaryGrid& g) {
  if (d.identity()) return g;
  if (d.quarter_turns % 2 != 0 && g.height() != g.width())
    throw ShapeError("quarter-turn rotation requires a square grid");
  BinaryGrid out(g.height(), g.width());
  for (std::size_t y = 0; y < g.height(); ++y)
    for (std::size_t x = 0; x < g.width(); ++x) {
      auto [sy, sx] = d.source(y, x, g.height(), g.width());
      out.set(y, x, g.at(sy, sx));
    }
  return out;
}

}  // namespace dseg
