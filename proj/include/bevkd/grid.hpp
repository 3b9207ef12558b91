#pragma once

#include <cstddef>
#include <utility>

namespace bevkd {

/// Fractional raster coordinates; integral values are cell centers.
struct CellCoord {
  double row = 0.0;
  double col = 0.0;
};

struct WorldPoint {
  double x = 0.0;
  double y = 0.0;
};

/// Axis-aligned BEV raster. Rows run along world y, columns along world x,
/// and cell (r, c) is represented by the center of its rectangle.
class BevGrid {
 public:
  BevGrid(std::size_t height_cells, std::size_t width_cells, double x_min, double x_max,
          double y_min, double y_max);

  std::size_t height_cells() const { return height_; }
  std::size_t width_cells() const { return width_; }
  std::size_t num_cells() const { return height_ * width_; }
  double x_min() const { return x_min_; }
  double x_max() const { return x_max_; }
  double y_min() const { return y_min_; }
  double y_max() const { return y_max_; }
  double cell_size_x() const { return (x_max_ - x_min_) / static_cast<double>(width_); }
  double cell_size_y() const { return (y_max_ - y_min_) / static_cast<double>(height_); }
  /// Largest world side length; the scale used to normalize box vectors.
  double extent() const;

  CellCoord world_to_cell(double x, double y) const;
  WorldPoint cell_to_world(double row, double col) const;
  bool contains(double x, double y) const;
  /// Row-major flat index of an integral cell.
  std::size_t index(std::size_t row, std::size_t col) const { return row * width_ + col; }

  bool operator==(const BevGrid&) const = default;

 private:
  std::size_t height_;
  std::size_t width_;
  double x_min_;
  double x_max_;
  double y_min_;
  double y_max_;
};

/// Wraps an angle into [-pi, pi). Throws std::invalid_argument on non-finite input.
double normalize_yaw(double theta);

}  // namespace bevkd
