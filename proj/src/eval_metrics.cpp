#include "bevkd/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace bevkd {

std::vector<Detection> detections_from(const PredictionSet& preds, std::size_t num_classes) {
  preds.validate();
  std::vector<Detection> out;
  out.reserve(preds.boxes.size());
  for (std::size_t i = 0; i < preds.boxes.size(); ++i) {
    Detection d;
    d.box = preds.boxes[i];
    d.box.class_id = static_cast<int>(preds.class_dists[i].argmax_foreground(num_classes));
    d.score = preds.class_dists[i].max_foreground(num_classes);
    out.push_back(d);
  }
  return out;
}

namespace {

std::vector<std::size_t> score_order(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

double center_distance(const BevBox& a, const BevBox& b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

MatchResult match_predictions(std::span<const Detection> dets, std::span<const BevBox> gts, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("match_predictions: threshold must be > 0");
  MatchResult r;
  r.gt_for_detection.assign(dets.size(), -1);
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t di : score_order(dets)) {
    const auto& d = dets[di];
    long best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].class_id != d.box.class_id) continue;
      const double dist = center_distance(d.box, gts[g]);
      if (dist <= threshold && dist < best_dist) {
        best = static_cast<long>(g);
        best_dist = dist;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      r.gt_for_detection[di] = best;
      ++r.num_matches;
    }
  }
  return r;
}

double average_precision(std::span<const int> tp_flags, std::size_t num_gt) {
  if (num_gt == 0) throw std::invalid_argument("average_precision: no ground truth");
  std::vector<double> precision;
  std::vector<double> recall;
  precision.reserve(tp_flags.size());
  recall.reserve(tp_flags.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < tp_flags.size(); ++i) {
    if (tp_flags[i]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  for (int k = 1; k <= 10; ++k) {
    const double r = static_cast<double>(k) / 10.0;
    double p = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      if (recall[i] + 1e-12 >= r) p = std::max(p, precision[i]);
    }
    ap += 0.1 * p;
  }
  return ap;
}

namespace {

void check_scene_counts(std::size_t a, std::size_t b) {
  if (a != b) throw std::invalid_argument("metrics: detection and ground-truth scene counts differ");
}

}  // namespace

double toy_map(std::span<const std::vector<Detection>> dets_per_scene,
               std::span<const std::vector<BevBox>> gts_per_scene, int num_classes) {
  check_scene_counts(dets_per_scene.size(), gts_per_scene.size());
  std::vector<std::size_t> gt_count(static_cast<std::size_t>(num_classes), 0);
  for (const auto& gts : gts_per_scene) {
    for (const auto& g : gts) {
      if (g.class_id < 0 || g.class_id >= num_classes) throw std::invalid_argument("toy_map: class out of range");
      ++gt_count[static_cast<std::size_t>(g.class_id)];
    }
  }
  double total = 0.0;
  std::size_t terms = 0;
  for (double threshold : kDistanceThresholds) {
    // (score, scene, index, tp) per class
    struct Entry {
      double score;
      std::size_t scene;
      std::size_t index;
      int tp;
    };
    std::vector<std::vector<Entry>> per_class(static_cast<std::size_t>(num_classes));
    for (std::size_t s = 0; s < dets_per_scene.size(); ++s) {
      const auto& dets = dets_per_scene[s];
      const MatchResult m = match_predictions(dets, gts_per_scene[s], threshold);
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const int c = dets[i].box.class_id;
        if (c < 0 || c >= num_classes) throw std::invalid_argument("toy_map: class out of range");
        per_class[static_cast<std::size_t>(c)].push_back({dets[i].score, s, i, m.gt_for_detection[i] >= 0 ? 1 : 0});
      }
    }
    for (int c = 0; c < num_classes; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      if (gt_count[cu] == 0) continue;
      auto& entries = per_class[cu];
      std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
      std::vector<int> flags;
      flags.reserve(entries.size());
      for (const auto& e : entries) flags.push_back(e.tp);
      total += average_precision(flags, gt_count[cu]);
      ++terms;
    }
  }
  return terms == 0 ? 0.0 : total / static_cast<double>(terms);
}

double yaw_difference(double a, double b) {
  double d = std::fmod(std::abs(a - b), 2.0 * std::numbers::pi);
  if (d > std::numbers::pi) d = 2.0 * std::numbers::pi - d;
  return d;
}

double scale_error(const BevBox& pred, const BevBox& gt) {
  const double inter = std::min(pred.w, gt.w) * std::min(pred.l, gt.l) * std::min(pred.h, gt.h);
  const double uni = pred.w * pred.l * pred.h + gt.w * gt.l * gt.h - inter;
  return 1.0 - inter / uni;
}

TpErrors tp_errors(std::span<const std::pair<BevBox, BevBox>> matched_pred_gt) {
  TpErrors e;
  if (matched_pred_gt.empty()) return e;
  e = TpErrors{0.0, 0.0, 0.0, 0.0, matched_pred_gt.size()};
  for (const auto& [p, g] : matched_pred_gt) {
    e.mate += center_distance(p, g);
    e.mase += scale_error(p, g);
    e.maoe += yaw_difference(p.yaw, g.yaw);
    e.mave += std::hypot(p.vx - g.vx, p.vy - g.vy);
  }
  const double n = static_cast<double>(matched_pred_gt.size());
  e.mate /= n;
  e.mase /= n;
  e.maoe /= n;
  e.mave /= n;
  return e;
}

TpErrors tp_errors_for(std::span<const std::vector<Detection>> dets_per_scene,
                       std::span<const std::vector<BevBox>> gts_per_scene) {
  check_scene_counts(dets_per_scene.size(), gts_per_scene.size());
  std::vector<std::pair<BevBox, BevBox>> pairs;
  for (std::size_t s = 0; s < dets_per_scene.size(); ++s) {
    const auto& dets = dets_per_scene[s];
    const MatchResult m = match_predictions(dets, gts_per_scene[s], kTpThreshold);
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (m.gt_for_detection[i] >= 0) {
        pairs.emplace_back(dets[i].box, gts_per_scene[s][static_cast<std::size_t>(m.gt_for_detection[i])]);
      }
    }
  }
  return tp_errors(pairs);
}

double nds(double map, std::span<const double> tp_errors) {
  if (!(map >= 0.0 && map <= 1.0)) throw std::invalid_argument("nds: mAP must lie in [0, 1]");
  double s = 5.0 * map;
  for (double t : tp_errors) {
    if (!(t >= 0.0)) throw std::invalid_argument("nds: TP errors must be >= 0");
    s += 1.0 - std::min(1.0, t);
  }
  return s / (5.0 + static_cast<double>(tp_errors.size()));
}

MetricReport evaluate(std::span<const std::vector<Detection>> dets_per_scene,
                      std::span<const std::vector<BevBox>> gts_per_scene, int num_classes) {
  MetricReport r;
  r.toy_map = toy_map(dets_per_scene, gts_per_scene, num_classes);
  const TpErrors e = tp_errors_for(dets_per_scene, gts_per_scene);
  r.mate = e.mate;
  r.mase = e.mase;
  r.maoe = e.maoe;
  r.mave = e.mave;
  const std::array<double, 4> tp{r.mate, r.mase, r.maoe, r.mave};
  r.toy_nds = nds(r.toy_map, tp);
  return r;
}

}  // namespace bevkd
