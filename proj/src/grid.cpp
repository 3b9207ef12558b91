#include "bevkd/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace bevkd {

BevGrid::BevGrid(std::size_t height_cells, std::size_t width_cells, double x_min, double x_max,
                 double y_min, double y_max)
    : height_(height_cells),
      width_(width_cells),
      x_min_(x_min),
      x_max_(x_max),
      y_min_(y_min),
      y_max_(y_max) {
  if (height_ < 1 || width_ < 1) {
    throw std::invalid_argument("BevGrid: cell counts must be positive");
  }
  if (!std::isfinite(x_min) || !std::isfinite(x_max) || !std::isfinite(y_min) ||
      !std::isfinite(y_max) || !(x_max > x_min) || !(y_max > y_min)) {
    throw std::invalid_argument("BevGrid: degenerate or non-finite extent");
  }
}

double BevGrid::extent() const { return std::max(x_max_ - x_min_, y_max_ - y_min_); }

CellCoord BevGrid::world_to_cell(double x, double y) const {
  return {(y - y_min_) / cell_size_y() - 0.5, (x - x_min_) / cell_size_x() - 0.5};
}

WorldPoint BevGrid::cell_to_world(double row, double col) const {
  return {x_min_ + (col + 0.5) * cell_size_x(), y_min_ + (row + 0.5) * cell_size_y()};
}

bool BevGrid::contains(double x, double y) const {
  return x >= x_min_ && x < x_max_ && y >= y_min_ && y < y_max_;
}

double normalize_yaw(double theta) {
  if (!std::isfinite(theta)) {
    throw std::invalid_argument("normalize_yaw: non-finite angle");
  }
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double r = std::fmod(theta + std::numbers::pi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  double out = r - std::numbers::pi;
  // fmod can land exactly on 2*pi after the shift for tiny negative inputs.
  if (out >= std::numbers::pi) out -= kTwoPi;
  return out;
}

}  // namespace bevkd
