#pragma once

// Quality-weighted sparse instance distillation.

#include <optional>
#include <span>
#include <vector>

#include "bevkd/set_matching.hpp"
#include "bevkd/types.hpp"

namespace bevkd {

/// Number of box regression outputs per query: x y z w l h sin cos vx vy.
inline constexpr std::size_t kBoxParams = 10;

/// Differentiable outputs of one decoder stage.
struct StagePredictions {
  Var probs;       // [N, K + 1], last column is background
  Var boxes;       // [N, kBoxParams], metric units, raw sin/cos
  Var embeddings;  // [N, E], penultimate features
  std::vector<WorldPoint> reference_points;
  int stage_index = 0;

  std::size_t size() const { return reference_points.size(); }
  /// Detached snapshot; yaw is recovered with atan2(sin, cos).
  PredictionSet to_prediction_set() const;
};

BevBox box_from_params(std::span<const double> params, int class_id);

struct QualityWeights {
  std::vector<double> weights;
};

/// Area of intersection over union of the yaw-rotated BEV footprints.
double rotated_bev_iou(const BevBox& a, const BevBox& b);

/// class_score^gamma * iou^(1 - gamma), with 0^0 = 1.
double quality_score(double class_score, double iou, double gamma);

/// Matches teacher predictions to ground truth (one-hot classes) with the
/// pairwise match cost; matched predictions get quality_score(max foreground
/// probability, IoU with their ground truth), the rest 0.
QualityWeights teacher_quality_weights(const PredictionSet& teacher, std::span<const BevBox> gt_boxes,
                                       const DistillConfig& config, double extent);

/// KL(teacher || student) over one row of student probabilities.
Var kl_class_distill(const Var& student_probs, std::size_t row, const ClassDistribution& teacher);

/// L1 between normalized box vectors; only the student side is differentiable.
Var box_distill_l1(const BevBox& teacher_box, const Var& student_boxes, std::size_t row,
                   double extent);

/// Contrastive per-anchor losses supplied by the critic, one per student
/// query of the stage being distilled.
struct ContrastiveTerms {
  Var per_anchor;           // [total anchors]
  std::size_t offset = 0;   // index of this stage's first query
};

struct InstanceLoss {
  Var cls;    // sum q_i * alpha * L_cls
  Var box;    // sum q_i * beta * L_box
  Var total;  // cls + box
};

/// Sum over matched (teacher i, student sigma(i)) pairs of
/// q_i * (alpha * L_cls + beta * L_box). L_cls is KL on class distributions
/// or, with config.use_contrastive_cls, the critic's per-anchor loss.
InstanceLoss instance_loss(const PredictionSet& teacher, const StagePredictions& student,
                           const QualityWeights& q, const Assignment& assignment,
                           const DistillConfig& config, double extent,
                           const ContrastiveTerms* critic);

}  // namespace bevkd
