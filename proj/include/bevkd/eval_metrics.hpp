#pragma once

// nuScenes-style detection metrics at toy scale: center-distance mAP, the
// true-positive error terms, and the detection score composition.

#include <array>
#include <span>
#include <utility>
#include <vector>

#include "bevkd/types.hpp"

namespace bevkd {

/// A scored detection.
struct Detection {
  BevBox box;
  double score = 0.0;
};

/// Detections from the final decoder stage: label = most likely foreground
/// class, score = its probability.
std::vector<Detection> detections_from(const PredictionSet& preds, std::size_t num_classes);

struct MatchResult {
  /// For each detection (in input order) the matched ground-truth index or -1.
  std::vector<long> gt_for_detection;
  std::size_t num_matches = 0;
};

/// Greedy matching in descending score order (ties by input order): each
/// detection takes the nearest unmatched ground truth of its class whose
/// BEV center distance is <= threshold.
MatchResult match_predictions(std::span<const Detection> dets, std::span<const BevBox> gts, double threshold);

inline constexpr std::array<double, 4> kDistanceThresholds{0.5, 1.0, 2.0, 4.0};
inline constexpr double kTpThreshold = 2.0;

/// Area under the interpolated precision-recall curve sampled at recall
/// 0, 0.1, ..., 1: sum over the ten intervals of 0.1 * max precision at
/// recall >= the interval's right end. `tp_flags` lists detections in
/// descending score order (1 = true positive).
double average_precision(std::span<const int> tp_flags, std::size_t num_gt);

/// Mean AP over thresholds and classes present in the ground truth.
double toy_map(std::span<const std::vector<Detection>> dets_per_scene,
               std::span<const std::vector<BevBox>> gts_per_scene, int num_classes);

struct TpErrors {
  double mate = 1.0;
  double mase = 1.0;
  double maoe = 1.0;
  double mave = 1.0;
  std::size_t count = 0;
};

/// Yaw difference folded into [0, pi].
double yaw_difference(double a, double b);
/// 1 - IoU of the two boxes after aligning centers and headings.
double scale_error(const BevBox& pred, const BevBox& gt);

/// Means over matched pairs; with no pairs every error is 1.
TpErrors tp_errors(std::span<const std::pair<BevBox, BevBox>> matched_pred_gt);

/// TP errors over all scenes using matches at the 2 m threshold.
TpErrors tp_errors_for(std::span<const std::vector<Detection>> dets_per_scene,
                       std::span<const std::vector<BevBox>> gts_per_scene);

/// (5 * mAP + sum(1 - min(1, tp))) / (5 + |tp|). Four terms gives the toy
/// score (1/9 scaling); five terms reproduces the standard 1/10 form.
double nds(double map, std::span<const double> tp_errors);

struct MetricReport {
  double toy_map = 0.0;
  double mate = 1.0;
  double mase = 1.0;
  double maoe = 1.0;
  double mave = 1.0;
  double toy_nds = 0.0;

  bool operator==(const MetricReport&) const = default;
};

MetricReport evaluate(std::span<const std::vector<Detection>> dets_per_scene,
                      std::span<const std::vector<BevBox>> gts_per_scene, int num_classes);

}  // namespace bevkd
