#include "bevkd/instance_distill.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace bevkd {

BevBox box_from_params(std::span<const double> p, int class_id) {
  if (p.size() != kBoxParams) throw std::invalid_argument("box_from_params: expected 10 values");
  BevBox b{p[0], p[1], p[2], p[3], p[4], p[5], normalize_yaw(std::atan2(p[6], p[7])), p[8], p[9], class_id};
  return b;
}

PredictionSet StagePredictions::to_prediction_set() const {
  PredictionSet out;
  out.stage_index = stage_index;
  const std::size_t n = size();
  const std::size_t k = probs.shape()[1];
  const std::size_t e = embeddings.shape()[1];
  const auto& pv = probs.value().data;
  const auto& bv = boxes.value().data;
  const auto& ev = embeddings.value().data;
  for (std::size_t i = 0; i < n; ++i) {
    ClassDistribution cd(std::vector<double>(pv.begin() + static_cast<long>(i * k),
                                             pv.begin() + static_cast<long>((i + 1) * k)));
    const int cls = static_cast<int>(cd.argmax_foreground(k - 1));
    out.boxes.push_back(box_from_params(std::span(bv).subspan(i * kBoxParams, kBoxParams), cls));
    out.class_dists.push_back(std::move(cd));
    out.embeddings.emplace_back(ev.begin() + static_cast<long>(i * e), ev.begin() + static_cast<long>((i + 1) * e));
    out.reference_points.push_back(reference_points[i]);
  }
  return out;
}

namespace {

using Vec2 = std::array<double, 2>;
using Polygon = std::vector<Vec2>;

Polygon footprint(const BevBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  // counter-clockwise
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  Polygon out;
  for (const auto& [lx, ly] : local) out.push_back({b.x + c * lx - s * ly, b.y + s * lx + c * ly});
  return out;
}

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

double area(const Polygon& p) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& a = p[i];
    const auto& b = p[(i + 1) % p.size()];
    s += a[0] * b[1] - a[1] * b[0];
  }
  return 0.5 * std::fabs(s);
}

// Sutherland-Hodgman clip of `subject` against the convex CCW `clip`.
Polygon clip_convex(Polygon subject, const Polygon& clip, double eps) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2& a = clip[e];
    const Vec2& b = clip[(e + 1) % clip.size()];
    Polygon input = std::move(subject);
    subject.clear();
    for (std::size_t i = 0; i < input.size(); ++i) {
      const Vec2& cur = input[i];
      const Vec2& prev = input[(i + input.size() - 1) % input.size()];
      const double dc = cross(a, b, cur);
      const double dp = cross(a, b, prev);
      const bool cur_in = dc >= -eps;
      const bool prev_in = dp >= -eps;
      if (cur_in != prev_in) {
        const double t = dp / (dp - dc);
        subject.push_back({prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])});
      }
      if (cur_in) subject.push_back(cur);
    }
  }
  return subject;
}

}  // namespace

double rotated_bev_iou(const BevBox& a_in, const BevBox& b_in) {
  // Fixed argument order makes the result exactly symmetric.
  const bool swap = b_in.to_array() < a_in.to_array();
  const BevBox& a = swap ? b_in : a_in;
  const BevBox& b = swap ? a_in : b_in;
  const Polygon pa = footprint(a);
  const Polygon pb = footprint(b);
  const double area_a = a.w * a.l;
  const double area_b = b.w * b.l;
  const double scale = std::max({std::fabs(a.x), std::fabs(a.y), std::fabs(b.x), std::fabs(b.y), a.l, a.w, b.l, b.w});
  const double eps = 1e-12 * scale * scale;
  const Polygon inter = clip_convex(pa, pb, eps);
  const double ai = inter.size() >= 3 ? std::min(area(inter), std::min(area_a, area_b)) : 0.0;
  // Identical footprints clip to the subject polygon itself.
  const double uni = area_a + area_b - ai;
  if (!(uni > 0.0)) return 0.0;
  return std::clamp(ai / uni, 0.0, 1.0);
}

double quality_score(double class_score, double iou, double gamma) {
  if (!(class_score >= 0.0 && class_score <= 1.0)) throw std::invalid_argument("quality_score: class score outside [0, 1]");
  if (!(iou >= 0.0 && iou <= 1.0)) throw std::invalid_argument("quality_score: IoU outside [0, 1]");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("quality_score: gamma outside [0, 1]");
  // std::pow(0, 0) == 1
  return std::pow(class_score, gamma) * std::pow(iou, 1.0 - gamma);
}

QualityWeights teacher_quality_weights(const PredictionSet& teacher, std::span<const BevBox> gt_boxes,
                                       const DistillConfig& config, double extent) {
  QualityWeights q{std::vector<double>(teacher.size(), 0.0)};
  if (teacher.size() == 0 || gt_boxes.empty()) return q;
  const std::size_t k = teacher.class_dists.front().size();
  CostMatrix costs(gt_boxes.size(), teacher.size());
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    const auto gt_class = ClassDistribution::one_hot(k, static_cast<std::size_t>(gt_boxes[g].class_id));
    for (std::size_t j = 0; j < teacher.size(); ++j)
      costs(g, j) = pair_match_cost(gt_class, gt_boxes[g], teacher.class_dists[j], teacher.boxes[j], extent);
  }
  const Assignment a = hungarian_assign(costs);
  for (const auto& [g, j] : a.pairs) {
    const double score = teacher.class_dists[j].max_foreground(k - 1);
    q.weights[j] = quality_score(score, rotated_bev_iou(gt_boxes[g], teacher.boxes[j]), config.gamma);
  }
  return q;
}

Var kl_class_distill(const Var& student_probs, std::size_t row, const ClassDistribution& teacher) {
  const std::size_t k = student_probs.shape().at(1);
  if (teacher.size() != k) throw std::invalid_argument("kl_class_distill: class count mismatch");
  std::vector<std::size_t> rows{row};
  Var s = ad::gather_rows(student_probs, rows);
  double entropy_term = 0.0;
  for (double t : teacher.probs())
    if (t > 0.0) entropy_term += t * std::log(t);
  Var cross = ad::sum(ad::mul_const(ad::log_clamped(s, kMatchProbFloor), Tensor({1, k}, teacher.probs())));
  return ad::add_scalar(ad::scale(cross, -1.0), entropy_term);
}

Var box_distill_l1(const BevBox& teacher_box, const Var& student_boxes, std::size_t row, double extent) {
  std::vector<std::size_t> rows{row};
  Var s = ad::slice_cols(ad::gather_rows(student_boxes, rows), 0, 8);
  const double inv = 1.0 / extent;
  Var scaled = ad::mul_const(s, Tensor({1, 8}, {inv, inv, inv, inv, inv, inv, 1.0, 1.0}));
  const auto t = normalized_box_vector(teacher_box, extent);
  Var target = s.tape().constant(Tensor({1, 8}, std::vector<double>(t.begin(), t.end())));
  return ad::sum(ad::abs(ad::sub(scaled, target)));
}

InstanceLoss instance_loss(const PredictionSet& teacher, const StagePredictions& student,
                           const QualityWeights& q, const Assignment& assignment,
                           const DistillConfig& config, double extent,
                           const ContrastiveTerms* critic) {
  if (config.use_contrastive_cls && critic == nullptr) {
    throw std::invalid_argument("instance_loss: contrastive mode requires a critic");
  }
  if (q.weights.size() != teacher.size()) throw std::invalid_argument("instance_loss: one weight per teacher prediction");
  Tape& tape = student.probs.tape();
  std::vector<Var> cls_terms, box_terms;
  for (const auto& [ti, sj] : assignment.pairs) {
    if (ti >= teacher.size() || sj >= student.size()) {
      throw std::out_of_range("instance_loss: assignment does not index these sets");
    }
    const double w = q.weights[ti];
    if (w == 0.0) continue;
    if (config.alpha > 0.0) {
      Var lc = config.use_contrastive_cls
                   ? ad::reshape(ad::gather_rows(ad::reshape(critic->per_anchor, {critic->per_anchor.numel(), 1}),
                                                 std::vector<std::size_t>{critic->offset + sj}),
                                 {1})
                   : kl_class_distill(student.probs, sj, teacher.class_dists[ti]);
      cls_terms.push_back(ad::scale(lc, w * config.alpha));
    }
    if (config.beta > 0.0) {
      box_terms.push_back(ad::scale(box_distill_l1(teacher.boxes[ti], student.boxes, sj, extent), w * config.beta));
    }
  }
  InstanceLoss out;
  out.cls = ad::sum_scalars(tape, cls_terms);
  out.box = ad::sum_scalars(tape, box_terms);
  out.total = ad::add(out.cls, out.box);
  return out;
}

}  // namespace bevkd
