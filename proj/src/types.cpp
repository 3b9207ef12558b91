#include "bevkd/types.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bevkd {

BevBox BevBox::make(double x, double y, double z, double w, double l, double h, double yaw,
                    double vx, double vy, int class_id) {
  BevBox b{x, y, z, w, l, h, normalize_yaw(yaw), vx, vy, class_id};
  b.validate(std::max(class_id + 1, kDefaultNumClasses));
  return b;
}

void BevBox::validate(int num_classes) const {
  for (double v : {x, y, z, w, l, h, yaw, vx, vy}) {
    if (!std::isfinite(v)) throw std::invalid_argument("BevBox: non-finite field");
  }
  if (!(w > 0.0 && l > 0.0 && h > 0.0)) throw std::invalid_argument("BevBox: sizes must be positive");
  if (yaw < -std::numbers::pi || yaw >= std::numbers::pi) throw std::invalid_argument("BevBox: yaw outside [-pi, pi)");
  if (class_id < 0 || class_id >= num_classes) {
    throw std::invalid_argument("BevBox: class_id " + std::to_string(class_id) + " out of range");
  }
}

std::array<double, 10> BevBox::to_array() const {
  return {x, y, z, w, l, h, yaw, vx, vy, static_cast<double>(class_id)};
}

BevBox BevBox::from_array(std::span<const double> v) {
  if (v.size() != 10) throw std::invalid_argument("BevBox::from_array: expected 10 numbers");
  const double cls = v[9];
  if (cls != std::floor(cls)) throw std::invalid_argument("BevBox::from_array: non-integer class");
  BevBox b{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], static_cast<int>(cls)};
  b.validate(std::max(b.class_id + 1, kDefaultNumClasses));
  return b;
}

std::array<double, 8> normalized_box_vector(const BevBox& b, double extent) {
  return {b.x / extent, b.y / extent, b.z / extent, b.w / extent,
          b.l / extent, b.h / extent, std::sin(b.yaw), std::cos(b.yaw)};
}

ClassDistribution::ClassDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw std::invalid_argument("ClassDistribution: empty");
  double s = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("ClassDistribution: entry outside [0, 1]");
    s += p;
  }
  if (std::fabs(s - 1.0) > kSumTolerance) {
    throw std::invalid_argument("ClassDistribution: entries sum to " + std::to_string(s));
  }
}

ClassDistribution ClassDistribution::one_hot(std::size_t size, std::size_t index) {
  if (index >= size) throw std::out_of_range("ClassDistribution::one_hot: index out of range");
  std::vector<double> p(size, 0.0);
  p[index] = 1.0;
  return ClassDistribution(std::move(p));
}

std::size_t ClassDistribution::argmax() const {
  return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

double ClassDistribution::max_foreground(std::size_t num_foreground) const {
  return probs_[argmax_foreground(num_foreground)];
}

std::size_t ClassDistribution::argmax_foreground(std::size_t num_foreground) const {
  const auto n = std::min(num_foreground, probs_.size());
  if (n == 0) throw std::invalid_argument("ClassDistribution: no foreground classes");
  return static_cast<std::size_t>(std::max_element(probs_.begin(), probs_.begin() + static_cast<long>(n)) -
                                  probs_.begin());
}

void PredictionSet::validate() const {
  const std::size_t n = boxes.size();
  if (class_dists.size() != n || embeddings.size() != n || reference_points.size() != n) {
    throw std::invalid_argument("PredictionSet: list lengths differ");
  }
  for (const auto& e : embeddings) {
    if (e.size() != embeddings.front().size()) {
      throw std::invalid_argument("PredictionSet: embedding dimensions differ");
    }
  }
}

FeatureMap::FeatureMap(BevGrid g, Var v) : grid(g), values(v) {
  const auto& s = values.shape();
  if (s.size() != 3 || s[0] != grid.height_cells() || s[1] != grid.width_cells() || s[2] == 0) {
    throw std::invalid_argument("FeatureMap: values " + shape_str(s) + " inconsistent with grid");
  }
  channels = s[2];
  for (double x : values.value().data) {
    if (!std::isfinite(x)) throw std::invalid_argument("FeatureMap: non-finite value");
  }
}

Var FeatureMap::cells() const { return ad::reshape(values, {grid.num_cells(), channels}); }

void DistillConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("DistillConfig: " + what); };
  if (!(sigma > 0.0)) fail("sigma must be > 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail("gamma must be in [0, 1]");
  if (!(alpha >= 0.0)) fail("alpha must be >= 0");
  if (!(beta >= 0.0)) fail("beta must be >= 0");
  if (!(tau > 0.0)) fail("tau must be > 0");
  if (!(lambda_feat >= 0.0)) fail("lambda_feat must be >= 0");
}

}  // namespace bevkd
