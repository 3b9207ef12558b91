#pragma once

// Learned critic for the mutual-information bound between paired student and
// teacher BEV features: bilinear sampling, twin projection heads, InfoNCE.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "bevkd/types.hpp"

namespace bevkd {

class Rng;

/// Three affine layers with ReLU between them, output L2-normalized.
struct ProjectionHead {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t output_dim = 0;
  // weights stored [in, out] so that y = x * W + b
  Tensor w1, b1, w2, b2, w3, b3;

  static ProjectionHead init(std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim, Rng& rng);
  static ProjectionHead zeros(std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim);

  /// Named parameter tensors in a fixed order.
  std::vector<std::pair<std::string, Tensor*>> parameters(const std::string& prefix);
};

/// Tape-resident parameters of a ProjectionHead for one forward pass.
struct ProjectionVars {
  Var w1, b1, w2, b2, w3, b3;
};

ProjectionVars bind(Tape& tape, const ProjectionHead& head, bool trainable);

struct CriticHandle {
  ProjectionHead head_2d;
  ProjectionHead head_3d;
  double tau = 0.07;

  /// Hidden width = feature_dim, output width = feature_dim / 2.
  static CriticHandle init(std::size_t feature_dim, double tau, Rng& rng);
  std::vector<std::pair<std::string, Tensor*>> parameters();
};

struct CriticVars {
  ProjectionVars head_2d;
  ProjectionVars head_3d;
  double tau = 0.07;
};

CriticVars bind(Tape& tape, const CriticHandle& critic, bool trainable);

/// Features of `map` at one world point, [1, C].
Var bilinear_sample(const FeatureMap& map, WorldPoint point);
/// Features at many points, [P, C].
Var bilinear_sample(const FeatureMap& map, std::span<const WorldPoint> points);

/// Forward pass over rows of `features` ([P, input_dim]) -> [P, output_dim],
/// unit-length rows.
Var project(const ProjectionVars& head, const Var& features);

/// Projected pairs; positives share an index.
struct PairBatch {
  Var x_2d;  // [K+1, D_p]
  Var x_3d;  // [K+1, D_p]
};

/// Per-anchor -log(exp(s_ii/tau) / D_i), [K+1].
Var infonce_per_anchor(const PairBatch& batch, double tau, bool include_positive);
/// Mean of infonce_per_anchor.
Var infonce_loss(const PairBatch& batch, double tau, bool include_positive);
/// Positive-only alternative: 1 - x_2d[i] . x_3d[i] per anchor.
Var positive_cosine_per_anchor(const PairBatch& batch);

enum class CriticObjective { InfoNce, PositiveCosine };

/// Samples both maps at the reference points, projects each side with its
/// own head, and returns the per-anchor objective. The teacher map is
/// detached; both heads stay trainable.
Var critic_per_anchor(const CriticVars& critic, const FeatureMap& student_map, const FeatureMap& teacher_map,
                      std::span<const WorldPoint> reference_points, bool include_positive,
                      CriticObjective objective = CriticObjective::InfoNce);

/// Mean InfoNCE over all reference points (at least two).
Var critic_class_loss(const CriticVars& critic, const FeatureMap& student_map, const FeatureMap& teacher_map,
                      std::span<const WorldPoint> reference_points, bool include_positive);

}  // namespace bevkd
