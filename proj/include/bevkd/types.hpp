#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bevkd/autodiff.hpp"
#include "bevkd/grid.hpp"

namespace bevkd {

inline constexpr int kDefaultNumClasses = 4;

/// 3D box in the BEV-centric parametrization. `l` runs along the heading,
/// `w` across it; yaw is counter-clockwise from +x.
struct BevBox {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
  double w = 1.0;
  double l = 1.0;
  double h = 1.0;
  double yaw = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  int class_id = 0;

  /// Builds a box with yaw wrapped into [-pi, pi); throws on non-positive sizes.
  static BevBox make(double x, double y, double z, double w, double l, double h, double yaw,
                     double vx, double vy, int class_id);

  /// Throws std::invalid_argument when an invariant does not hold.
  void validate(int num_classes = kDefaultNumClasses) const;

  std::array<double, 10> to_array() const;
  static BevBox from_array(std::span<const double> v);

  bool operator==(const BevBox&) const = default;
};

/// Normalized box vector (x, y, z, w, l, h, sin yaw, cos yaw); metric entries
/// divided by the grid extent.
std::array<double, 8> normalized_box_vector(const BevBox& box, double extent);

/// A probability vector over classes. Model outputs carry one extra trailing
/// entry for "background".
class ClassDistribution {
 public:
  static constexpr double kSumTolerance = 1e-6;

  explicit ClassDistribution(std::vector<double> probs);
  static ClassDistribution one_hot(std::size_t size, std::size_t index);

  const std::vector<double>& probs() const { return probs_; }
  std::size_t size() const { return probs_.size(); }
  double operator[](std::size_t k) const { return probs_[k]; }
  std::size_t argmax() const;
  /// Highest probability among the first `num_foreground` entries.
  double max_foreground(std::size_t num_foreground) const;
  std::size_t argmax_foreground(std::size_t num_foreground) const;

  bool operator==(const ClassDistribution&) const = default;

 private:
  std::vector<double> probs_;
};

/// N query outputs of one decoder stage.
struct PredictionSet {
  std::vector<BevBox> boxes;
  std::vector<ClassDistribution> class_dists;
  std::vector<std::vector<double>> embeddings;
  std::vector<WorldPoint> reference_points;
  int stage_index = 0;

  std::size_t size() const { return boxes.size(); }
  void validate() const;
};

/// BEV feature raster of shape [H, W, C] living on a tape.
struct FeatureMap {
  BevGrid grid;
  std::size_t channels = 0;
  Var values;

  FeatureMap(BevGrid g, Var v);
  std::size_t num_cells() const { return grid.num_cells(); }
  /// Flattened [H*W, C] view.
  Var cells() const;
};

struct DistillConfig {
  double sigma = 2.0;
  double gamma = 0.5;
  double alpha = 1.0;
  double beta = 0.25;
  double tau = 0.07;
  double lambda_feat = 1.0;
  bool include_positive_in_denominator = true;
  bool use_contrastive_cls = true;

  void validate() const;
  bool operator==(const DistillConfig&) const = default;
};

}  // namespace bevkd
