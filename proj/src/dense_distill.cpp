#include "bevkd/dense_distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace bevkd {

namespace {

constexpr double kMaskNormFloor = 1e-6;

void require_same_layout(const FeatureMap& a, const FeatureMap& b) {
  if (!(a.grid == b.grid) || a.channels != b.channels) {
    throw std::invalid_argument("feature loss: student " + shape_str(a.values.shape()) +
                                " and teacher " + shape_str(b.values.shape()) + " differ");
  }
}

// Per-cell L2 distance, [H*W]. The teacher side is re-entered as a constant so
// no gradient can reach it.
Var cell_distances(const FeatureMap& student, const FeatureMap& teacher) {
  require_same_layout(student, teacher);
  Tape& tape = student.values.tape();
  Var t = tape.constant(Tensor({student.num_cells(), student.channels}, teacher.values.value().data));
  return ad::row_l2_norm(ad::sub(t, student.cells()));
}

// Nearest integral cell, or nullopt when the point is outside the grid.
std::optional<std::size_t> nearest_cell(const BevGrid& grid, WorldPoint p) {
  if (!grid.contains(p.x, p.y)) return std::nullopt;
  CellCoord cc = grid.world_to_cell(p.x, p.y);
  const auto r = static_cast<std::size_t>(
      std::clamp(std::lround(cc.row), 0L, static_cast<long>(grid.height_cells()) - 1));
  const auto c = static_cast<std::size_t>(
      std::clamp(std::lround(cc.col), 0L, static_cast<long>(grid.width_cells()) - 1));
  return grid.index(r, c);
}

}  // namespace

ForegroundMask::ForegroundMask(BevGrid g) : grid(g), weights(g.num_cells(), 0.0) {}

ForegroundMask::ForegroundMask(BevGrid g, std::vector<double> w) : grid(g), weights(std::move(w)) {
  if (weights.size() != grid.num_cells()) throw std::invalid_argument("ForegroundMask: size mismatch");
  for (double x : weights) {
    if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("ForegroundMask: weight outside [0, 1]");
  }
}

double ForegroundMask::total() const {
  double s = 0.0;
  for (double w : weights) s += w;
  return s;
}

const char* to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::GtHeatmap: return "gt_heatmap";
    case MaskStrategy::GtCenter: return "gt_center";
    case MaskStrategy::QueryCenter: return "query_center";
    case MaskStrategy::PredHeatmap: return "pred_heatmap";
  }
  return "?";
}

MaskStrategy mask_strategy_from_string(const std::string& name) {
  for (auto s : {MaskStrategy::GtHeatmap, MaskStrategy::GtCenter, MaskStrategy::QueryCenter,
                 MaskStrategy::PredHeatmap}) {
    if (name == to_string(s)) return s;
  }
  throw std::invalid_argument("unknown mask strategy '" + name + "'");
}

ForegroundMask gaussian_center_weight(WorldPoint center, const BevGrid& grid, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_center_weight: sigma must be > 0");
  ForegroundMask mask(grid);
  const CellCoord cc = grid.world_to_cell(center.x, center.y);
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t r = 0; r < grid.height_cells(); ++r) {
    const double dr = static_cast<double>(r) - cc.row;
    for (std::size_t c = 0; c < grid.width_cells(); ++c) {
      const double dc = static_cast<double>(c) - cc.col;
      mask.weights[grid.index(r, c)] = std::exp(-(dr * dr + dc * dc) / denom);
    }
  }
  return mask;
}

ForegroundMask merge_masks(const BevGrid& grid, std::span<const ForegroundMask> masks) {
  ForegroundMask out(grid);
  for (const auto& m : masks) {
    if (!(m.grid == grid)) throw std::invalid_argument("merge_masks: masks live on different grids");
    for (std::size_t i = 0; i < out.weights.size(); ++i) {
      out.weights[i] = std::max(out.weights[i], m.weights[i]);
    }
  }
  return out;
}

Var fitnet_feature_loss(const FeatureMap& student, const FeatureMap& teacher) {
  return ad::mean(cell_distances(student, teacher));
}

Var masked_feature_loss(const FeatureMap& student, const FeatureMap& teacher,
                        const ForegroundMask& mask) {
  if (!(mask.grid == student.grid)) throw std::invalid_argument("masked_feature_loss: mask grid differs");
  Var dist = cell_distances(student, teacher);
  const double norm = std::max(mask.total(), kMaskNormFloor);
  Var weighted = ad::sum(ad::mul_const(dist, Tensor({mask.weights.size()}, mask.weights)));
  return ad::scale(weighted, 1.0 / norm);
}

FeatureAdapter FeatureAdapter::identity(std::size_t channels) {
  FeatureAdapter a{Tensor({1, 1, channels, channels}), Tensor({channels})};
  for (std::size_t c = 0; c < channels; ++c) a.weight.data[c * channels + c] = 1.0;
  return a;
}

AdapterVars bind(Tape& tape, const FeatureAdapter& adapter, bool trainable) {
  if (adapter.weight.shape.size() != 4 || adapter.weight.shape[0] != 1 || adapter.weight.shape[1] != 1 ||
      adapter.weight.shape[2] != adapter.weight.shape[3] || adapter.bias.shape != Shape{adapter.weight.shape[3]}) {
    throw std::invalid_argument("FeatureAdapter: expected a square 1x1 kernel and matching bias");
  }
  if (trainable) return {tape.leaf(adapter.weight), tape.leaf(adapter.bias)};
  return {tape.constant(adapter.weight), tape.constant(adapter.bias)};
}

FeatureMap adapt_features(const FeatureMap& student, const AdapterVars& adapter) {
  return FeatureMap(student.grid, ad::conv2d(student.values, adapter.weight, adapter.bias));
}

ForegroundMask build_foreground_mask(std::span<const BevBox> gt_boxes, const BevGrid& grid,
                                     const DistillConfig& config, MaskStrategy strategy,
                                     const MaskAux& aux, const SigmaOverride& sigmas) {
  switch (strategy) {
    case MaskStrategy::GtHeatmap: {
      if (sigmas && sigmas->size() != gt_boxes.size()) {
        throw std::invalid_argument("build_foreground_mask: one sigma per box required");
      }
      ForegroundMask out(grid);
      for (std::size_t i = 0; i < gt_boxes.size(); ++i) {
        const double s = sigmas ? (*sigmas)[i] : config.sigma;
        ForegroundMask g = gaussian_center_weight({gt_boxes[i].x, gt_boxes[i].y}, grid, s);
        for (std::size_t k = 0; k < out.weights.size(); ++k)
          out.weights[k] = std::max(out.weights[k], g.weights[k]);
      }
      return out;
    }
    case MaskStrategy::GtCenter: {
      ForegroundMask out(grid);
      for (const auto& b : gt_boxes)
        if (auto idx = nearest_cell(grid, {b.x, b.y})) out.weights[*idx] = 1.0;
      return out;
    }
    case MaskStrategy::QueryCenter: {
      if (aux.reference_points.empty()) {
        throw std::invalid_argument("build_foreground_mask: query_center needs reference points");
      }
      ForegroundMask out(grid);
      for (const auto& p : aux.reference_points)
        if (auto idx = nearest_cell(grid, p)) out.weights[*idx] = 1.0;
      return out;
    }
    case MaskStrategy::PredHeatmap: {
      if (!aux.teacher_heatmap) {
        throw std::invalid_argument("build_foreground_mask: pred_heatmap needs a teacher heatmap");
      }
      const auto& hm = *aux.teacher_heatmap;
      if (hm.size() != grid.num_cells()) {
        throw std::invalid_argument("build_foreground_mask: heatmap size mismatch");
      }
      ForegroundMask out(grid);
      for (std::size_t k = 0; k < hm.size(); ++k) out.weights[k] = std::clamp(hm[k], 0.0, 1.0);
      return out;
    }
  }
  throw std::invalid_argument("build_foreground_mask: unknown strategy");
}

}  // namespace bevkd
