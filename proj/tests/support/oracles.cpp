#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace bevkd::testing {

bool inside_footprint(const BevBox& b, double x, double y) {
  const double dx = x - b.x, dy = y - b.y;
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double along = dx * c + dy * s;
  const double across = -dx * s + dy * c;
  return std::fabs(along) <= 0.5 * b.l && std::fabs(across) <= 0.5 * b.w;
}

double monte_carlo_iou(const BevBox& a, const BevBox& b, std::size_t samples, Rng& rng) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const BevBox* q : {&a, &b}) {
    const double c = std::cos(q->yaw), s = std::sin(q->yaw);
    const double hx = 0.5 * (std::fabs(c) * q->l + std::fabs(s) * q->w);
    const double hy = 0.5 * (std::fabs(s) * q->l + std::fabs(c) * q->w);
    x0 = std::min(x0, q->x - hx);
    x1 = std::max(x1, q->x + hx);
    y0 = std::min(y0, q->y - hy);
    y1 = std::max(y1, q->y + hy);
  }
  // Jittered stratified sampling: one uniform point per cell of a k x k lattice.
  const auto k = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(samples))));
  const double dx = (x1 - x0) / static_cast<double>(k), dy = (y1 - y0) / static_cast<double>(k);
  std::size_t both = 0, either = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double x = x0 + (static_cast<double>(i) + rng.uniform()) * dx;
      const double y = y0 + (static_cast<double>(j) + rng.uniform()) * dy;
      const bool ia = inside_footprint(a, x, y), ib = inside_footprint(b, x, y);
      both += ia && ib;
      either += ia || ib;
    }
  }
  return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

BevBox random_box(Rng& rng, double span, int num_classes) {
  return BevBox::make(rng.uniform(-span, span), rng.uniform(-span, span), rng.uniform(0.0, 2.0),
                      rng.uniform(0.5, 5.0), rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0),
                      rng.uniform(-std::numbers::pi, std::numbers::pi), rng.uniform(-5, 5), rng.uniform(-5, 5),
                      static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes))));
}

}  // namespace bevkd::testing
