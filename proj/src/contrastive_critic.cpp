#include "bevkd/contrastive_critic.hpp"

#include <cmath>
#include <stdexcept>

#include "bevkd/rng.hpp"

namespace bevkd {

namespace {

Tensor random_matrix(std::size_t in, std::size_t out, double stddev, Rng& rng) {
  Tensor t({in, out});
  for (auto& v : t.data) v = rng.normal(0.0, stddev);
  return t;
}

std::vector<std::pair<double, double>> as_pairs(std::span<const WorldPoint> points) {
  std::vector<std::pair<double, double>> out;
  out.reserve(points.size());
  for (const auto& p : points) out.emplace_back(p.x, p.y);
  return out;
}

}  // namespace

ProjectionHead ProjectionHead::init(std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim, Rng& rng) {
  ProjectionHead h = zeros(input_dim, hidden_dim, output_dim);
  h.w1 = random_matrix(input_dim, hidden_dim, std::sqrt(2.0 / static_cast<double>(input_dim)), rng);
  h.w2 = random_matrix(hidden_dim, hidden_dim, std::sqrt(2.0 / static_cast<double>(hidden_dim)), rng);
  h.w3 = random_matrix(hidden_dim, output_dim, std::sqrt(1.0 / static_cast<double>(hidden_dim)), rng);
  return h;
}

ProjectionHead ProjectionHead::zeros(std::size_t input_dim, std::size_t hidden_dim, std::size_t output_dim) {
  if (input_dim == 0 || hidden_dim == 0 || output_dim == 0) {
    throw std::invalid_argument("ProjectionHead: dimensions must be positive");
  }
  ProjectionHead h;
  h.input_dim = input_dim;
  h.hidden_dim = hidden_dim;
  h.output_dim = output_dim;
  h.w1 = Tensor({input_dim, hidden_dim});
  h.b1 = Tensor({hidden_dim});
  h.w2 = Tensor({hidden_dim, hidden_dim});
  h.b2 = Tensor({hidden_dim});
  h.w3 = Tensor({hidden_dim, output_dim});
  h.b3 = Tensor({output_dim});
  return h;
}

std::vector<std::pair<std::string, Tensor*>> ProjectionHead::parameters(const std::string& prefix) {
  return {{prefix + ".w1", &w1}, {prefix + ".b1", &b1}, {prefix + ".w2", &w2},
          {prefix + ".b2", &b2}, {prefix + ".w3", &w3}, {prefix + ".b3", &b3}};
}

ProjectionVars bind(Tape& tape, const ProjectionHead& head, bool trainable) {
  auto mk = [&](const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); };
  return {mk(head.w1), mk(head.b1), mk(head.w2), mk(head.b2), mk(head.w3), mk(head.b3)};
}

CriticHandle CriticHandle::init(std::size_t feature_dim, double tau, Rng& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("CriticHandle: tau must be > 0");
  const std::size_t out = std::max<std::size_t>(1, feature_dim / 2);
  CriticHandle c;
  c.head_2d = ProjectionHead::init(feature_dim, feature_dim, out, rng);
  c.head_3d = ProjectionHead::init(feature_dim, feature_dim, out, rng);
  c.tau = tau;
  return c;
}

std::vector<std::pair<std::string, Tensor*>> CriticHandle::parameters() {
  auto a = head_2d.parameters("critic.head_2d");
  auto b = head_3d.parameters("critic.head_3d");
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

CriticVars bind(Tape& tape, const CriticHandle& critic, bool trainable) {
  if (critic.head_2d.output_dim != critic.head_3d.output_dim) {
    throw std::invalid_argument("CriticHandle: heads disagree on output dimension");
  }
  return {bind(tape, critic.head_2d, trainable), bind(tape, critic.head_3d, trainable), critic.tau};
}

Var bilinear_sample(const FeatureMap& map, WorldPoint point) {
  const std::pair<double, double> p{point.x, point.y};
  return ad::bilinear_sample(map.values, map.grid, std::span(&p, 1));
}

Var bilinear_sample(const FeatureMap& map, std::span<const WorldPoint> points) {
  const auto pts = as_pairs(points);
  return ad::bilinear_sample(map.values, map.grid, pts);
}

Var project(const ProjectionVars& head, const Var& features) {
  const auto& s = features.shape();
  if (s.size() != 2 || s[1] != head.w1.shape()[0]) {
    throw std::invalid_argument("project: features " + shape_str(s) + " do not match head input " +
                                std::to_string(head.w1.shape()[0]));
  }
  Var h = ad::relu(ad::add_row_bias(ad::matmul(features, head.w1), head.b1));
  h = ad::relu(ad::add_row_bias(ad::matmul(h, head.w2), head.b2));
  h = ad::add_row_bias(ad::matmul(h, head.w3), head.b3);
  return ad::normalize_rows(h);
}

namespace {

Var similarity_logits(const PairBatch& batch, double tau) {
  const auto& a = batch.x_2d.shape();
  const auto& b = batch.x_3d.shape();
  if (a.size() != 2 || a != b) throw std::invalid_argument("PairBatch: sides must have equal shapes");
  if (a[0] < 2) throw std::invalid_argument("PairBatch: need at least two pairs");
  if (!(tau > 0.0)) throw std::invalid_argument("infonce: tau must be > 0");
  return ad::scale(ad::matmul(batch.x_2d, ad::transpose(batch.x_3d)), 1.0 / tau);
}

}  // namespace

Var infonce_per_anchor(const PairBatch& batch, double tau, bool include_positive) {
  return ad::contrastive_rows(similarity_logits(batch, tau), include_positive);
}

Var infonce_loss(const PairBatch& batch, double tau, bool include_positive) {
  return ad::mean(infonce_per_anchor(batch, tau, include_positive));
}

Var positive_cosine_per_anchor(const PairBatch& batch) {
  const auto& s = batch.x_2d.shape();
  if (s.size() != 2 || s != batch.x_3d.shape()) throw std::invalid_argument("PairBatch: sides must have equal shapes");
  Var prod = ad::mul(batch.x_2d, batch.x_3d);
  Tape& tape = prod.tape();
  Var ones = tape.constant(Tensor({s[1], 1}, 1.0));
  Var cos = ad::reshape(ad::matmul(prod, ones), {s[0]});
  return ad::add_scalar(ad::scale(cos, -1.0), 1.0);
}

Var critic_per_anchor(const CriticVars& critic, const FeatureMap& student_map, const FeatureMap& teacher_map,
                      std::span<const WorldPoint> reference_points, bool include_positive,
                      CriticObjective objective) {
  if (reference_points.size() < 2) throw std::invalid_argument("critic: need at least two reference points");
  if (!(student_map.grid == teacher_map.grid) || student_map.channels != teacher_map.channels) {
    throw std::invalid_argument("critic: student and teacher maps differ in layout");
  }
  Tape& tape = student_map.values.tape();
  FeatureMap teacher_detached(teacher_map.grid, tape.constant(teacher_map.values.value()));
  PairBatch batch{project(critic.head_2d, bilinear_sample(student_map, reference_points)),
                  project(critic.head_3d, bilinear_sample(teacher_detached, reference_points))};
  if (objective == CriticObjective::PositiveCosine) return positive_cosine_per_anchor(batch);
  return infonce_per_anchor(batch, critic.tau, include_positive);
}

Var critic_class_loss(const CriticVars& critic, const FeatureMap& student_map, const FeatureMap& teacher_map,
                      std::span<const WorldPoint> reference_points, bool include_positive) {
  return ad::mean(critic_per_anchor(critic, student_map, teacher_map, reference_points, include_positive));
}

}  // namespace bevkd
