#pragma once

// Foreground-guided dense imitation of teacher BEV features.

#include <optional>
#include <span>
#include <vector>

#include "bevkd/types.hpp"

namespace bevkd {

/// Per-cell imitation weights in [0, 1], row-major over the grid.
struct ForegroundMask {
  BevGrid grid;
  std::vector<double> weights;

  explicit ForegroundMask(BevGrid g);
  ForegroundMask(BevGrid g, std::vector<double> w);

  double at(std::size_t row, std::size_t col) const { return weights[grid.index(row, col)]; }
  double total() const;
};

enum class MaskStrategy { GtHeatmap, GtCenter, QueryCenter, PredHeatmap };

const char* to_string(MaskStrategy s);
MaskStrategy mask_strategy_from_string(const std::string& name);

/// Gaussian bump exp(-(dr^2 + dc^2) / (2 sigma^2)) with displacements in
/// cell units from the center's fractional cell coordinates.
ForegroundMask gaussian_center_weight(WorldPoint center, const BevGrid& grid, double sigma);

/// Pointwise maximum; an empty list yields the all-zero mask on `grid`.
ForegroundMask merge_masks(const BevGrid& grid, std::span<const ForegroundMask> masks);

/// Mean over cells of ||F_teacher - F_student||_2 (teacher treated as constant).
Var fitnet_feature_loss(const FeatureMap& student, const FeatureMap& teacher);

/// sum_ij W_ij ||F_teacher - F_student||_2 / max(sum_ij W_ij, 1e-6).
Var masked_feature_loss(const FeatureMap& student, const FeatureMap& teacher,
                        const ForegroundMask& mask);

/// Student-side 1x1 projection applied before imitation, so the student's
/// channel basis need not coincide with the teacher's. Starts as identity.
struct FeatureAdapter {
  Tensor weight;  // [1, 1, C, C]
  Tensor bias;    // [C]

  static FeatureAdapter identity(std::size_t channels);
  bool operator==(const FeatureAdapter&) const = default;
};

struct AdapterVars {
  Var weight;
  Var bias;
};

AdapterVars bind(Tape& tape, const FeatureAdapter& adapter, bool trainable);

FeatureMap adapt_features(const FeatureMap& student, const AdapterVars& adapter);

/// Inputs some strategies need beyond the ground truth.
struct MaskAux {
  /// Query reference points (QueryCenter).
  std::vector<WorldPoint> reference_points;
  /// Teacher per-cell classification heatmap, row-major, one score per cell
  /// (PredHeatmap).
  std::optional<std::vector<double>> teacher_heatmap;
};

/// Optional per-box sigma override for the Gaussian heatmap; nullopt uses
/// config.sigma for every box.
using SigmaOverride = std::optional<std::vector<double>>;

ForegroundMask build_foreground_mask(std::span<const BevBox> gt_boxes, const BevGrid& grid,
                                     const DistillConfig& config, MaskStrategy strategy,
                                     const MaskAux& aux = {}, const SigmaOverride& sigmas = {});

}  // namespace bevkd
