#include "bevkd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>

#include "bevkd/set_matching.hpp"

namespace bevkd {
namespace {

void require_finite(const Var& v, const char* component, std::uint64_t step) {
  if (!std::isfinite(v.item())) throw NonFiniteLoss(component, step);
}

Var zero(Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

// Parameter tensors and their tape handles, student first, critic after.
struct Trainables {
  std::vector<std::string> names;
  std::vector<Tensor*> tensors;
  std::vector<Var> vars;
};

Trainables collect(TrainState& state, const BoundWeights& sw, const CriticVars& cv, bool with_critic,
                   const AdapterVars* av) {
  Trainables t;
  for (auto& [name, tensor] : state.model.weights) {
    t.names.push_back(name);
    t.tensors.push_back(&tensor);
    t.vars.push_back(sw.at(name));
  }
  if (with_critic) {
    const std::vector<Var> vars{cv.head_2d.w1, cv.head_2d.b1, cv.head_2d.w2, cv.head_2d.b2, cv.head_2d.w3, cv.head_2d.b3,
                                cv.head_3d.w1, cv.head_3d.b1, cv.head_3d.w2, cv.head_3d.b2, cv.head_3d.w3, cv.head_3d.b3};
    const auto params = state.critic.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      t.names.push_back(params[i].first);
      t.tensors.push_back(params[i].second);
      t.vars.push_back(vars[i]);
    }
  }
  if (av != nullptr) {
    t.names.insert(t.names.end(), {"adapter.weight", "adapter.bias"});
    t.tensors.insert(t.tensors.end(), {&state.adapter.weight, &state.adapter.bias});
    t.vars.insert(t.vars.end(), {av->weight, av->bias});
  }
  return t;
}

void sgd_update(TrainState& state, const Trainables& t, const StepConfig& config) {
  double sq = 0.0;
  for (const Var& v : t.vars)
    for (double g : v.grad()) sq += g * g;
  if (!std::isfinite(sq)) throw NonFiniteLoss("gradient", state.step);
  const double norm = std::sqrt(sq);
  const double clip = norm > config.clip_norm ? config.clip_norm / norm : 1.0;
  for (std::size_t i = 0; i < t.vars.size(); ++i) {
    const auto& g = t.vars[i].grad();
    if (g.empty()) continue;
    auto& w = t.tensors[i]->data;
    if (config.momentum > 0.0) {
      auto& buf = state.optimizer.velocity[t.names[i]];
      buf.resize(w.size(), 0.0);
      for (std::size_t k = 0; k < w.size(); ++k) {
        buf[k] = config.momentum * buf[k] + clip * g[k];
        w[k] -= config.learning_rate * buf[k];
      }
    } else {
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= config.learning_rate * clip * g[k];
    }
  }
}

LossReport report_of(const StepLosses& l) {
  return {l.task.item(), l.feat.item(), l.inst_cls.item(), l.inst_box.item(), l.total.item()};
}

LossReport run_step(TrainState& state, const Scene& scene, Modality modality, const StepConfig& config,
                    const TeacherView* teacher) {
  Tape tape;
  const BoundWeights sw = bind_weights(tape, state.model.weights, true);
  const bool with_critic = config.effective_distill().use_contrastive_cls && config.effective_distill().alpha > 0.0;
  const CriticVars cv = bind(tape, state.critic, with_critic);
  std::optional<AdapterVars> av;
  if (config.uses_adapter()) av = bind(tape, state.adapter, true);
  const StepLosses losses =
      build_step_losses(tape, sw, cv, state.model.config, scene, modality, teacher, config, av ? &*av : nullptr);
  require_finite(losses.task, "task_loss", state.step);
  require_finite(losses.feat, "feat_loss", state.step);
  require_finite(losses.inst_cls, "inst_cls_loss", state.step);
  require_finite(losses.inst_box, "inst_box_loss", state.step);
  require_finite(losses.total, "total", state.step);
  tape.backward(losses.total);
  sgd_update(state, collect(state, sw, cv, with_critic, av ? &*av : nullptr), config);
  ++state.step;
  state.history.push_back(report_of(losses));
  return state.history.back();
}

}  // namespace

const Tensor& input_of(const Scene& scene, Modality m) {
  return m == Modality::Lidar ? scene.lidar_like : scene.camera_like;
}

void TaskLossConfig::validate() const {
  if (!(box_weight >= 0.0) || !(velocity_weight >= 0.0) || !(background_weight >= 0.0) || !(proposal_weight >= 0.0)) {
    throw std::invalid_argument("TaskLossConfig: weights must be non-negative");
  }
  if (!(velocity_scale > 0.0)) throw std::invalid_argument("TaskLossConfig: velocity_scale must be > 0");
}

Var student_task_loss(std::span<const StagePredictions> stages, std::span<const BevBox> gt_boxes, double extent,
                      const TaskLossConfig& config) {
  if (stages.empty()) throw std::invalid_argument("student_task_loss: no stages");
  Tape& tape = stages.front().probs.tape();
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, gt_boxes.size()));
  std::vector<Var> per_stage;
  for (const StagePredictions& st : stages) {
    const std::size_t Q = st.size(), K1 = st.probs.shape().at(1);
    const PredictionSet snap = st.to_prediction_set();
    CostMatrix costs(gt_boxes.size(), Q);
    for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
      const auto gt_class = ClassDistribution::one_hot(K1, static_cast<std::size_t>(gt_boxes[g].class_id));
      for (std::size_t j = 0; j < Q; ++j)
        costs(g, j) = pair_match_cost(gt_class, gt_boxes[g], snap.class_dists[j], snap.boxes[j], extent);
    }
    const Assignment a = hungarian_assign(costs);

    // Cross-entropy weights: the matched class, or background for the rest.
    Tensor ce_w({Q, K1});
    for (std::size_t j = 0; j < Q; ++j) ce_w.data[j * K1 + K1 - 1] = config.background_weight;
    std::vector<std::size_t> rows;
    std::vector<double> box_target, vel_target;
    for (const auto& [g, j] : a.pairs) {
      ce_w.data[j * K1 + K1 - 1] = 0.0;
      ce_w.data[j * K1 + static_cast<std::size_t>(gt_boxes[g].class_id)] = 1.0;
      rows.push_back(j);
      const auto v = normalized_box_vector(gt_boxes[g], extent);
      box_target.insert(box_target.end(), v.begin(), v.end());
      vel_target.push_back(gt_boxes[g].vx / config.velocity_scale);
      vel_target.push_back(gt_boxes[g].vy / config.velocity_scale);
    }
    Var ce = ad::scale(ad::sum(ad::mul_const(ad::log_clamped(st.probs, kMatchProbFloor), ce_w)), -1.0);
    std::vector<Var> terms{ce};
    if (!rows.empty()) {
      const std::size_t m = rows.size();
      Var matched = ad::gather_rows(st.boxes, rows);
      if (config.box_weight > 0.0) {
        const double inv = 1.0 / extent;
        Tensor sc({m, 8});
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t k = 0; k < 8; ++k) sc.data[r * 8 + k] = k < 6 ? inv : 1.0;
        Var diff = ad::sub(ad::mul_const(ad::slice_cols(matched, 0, 8), sc), tape.constant(Tensor({m, 8}, box_target)));
        terms.push_back(ad::scale(ad::sum(ad::abs(diff)), config.box_weight));
      }
      if (config.velocity_weight > 0.0) {
        Var vel = ad::scale(ad::slice_cols(matched, 8, 10), 1.0 / config.velocity_scale);
        Var diff = ad::sub(vel, tape.constant(Tensor({m, 2}, vel_target)));
        terms.push_back(ad::scale(ad::sum(ad::abs(diff)), config.velocity_weight));
      }
    }
    per_stage.push_back(ad::scale(ad::sum_scalars(tape, terms), norm));
  }
  return ad::scale(ad::sum_scalars(tape, per_stage), 1.0 / static_cast<double>(stages.size()));
}

Tensor objectness_target(std::span<const BevBox> gt_boxes, const BevGrid& grid, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("objectness_target: sigma must be > 0");
  const std::size_t H = grid.height_cells(), W = grid.width_cells();
  Tensor t({H, W, 1});
  const long reach = static_cast<long>(std::ceil(3.0 * sigma));
  for (const auto& b : gt_boxes) {
    if (!grid.contains(b.x, b.y)) continue;
    const CellCoord cc = grid.world_to_cell(b.x, b.y);
    const long r0 = std::clamp(std::lround(cc.row), 0L, static_cast<long>(H) - 1);
    const long c0 = std::clamp(std::lround(cc.col), 0L, static_cast<long>(W) - 1);
    for (long r = std::max(0L, r0 - reach); r <= std::min(static_cast<long>(H) - 1, r0 + reach); ++r) {
      for (long c = std::max(0L, c0 - reach); c <= std::min(static_cast<long>(W) - 1, c0 + reach); ++c) {
        const double d2 = static_cast<double>((r - r0) * (r - r0) + (c - c0) * (c - c0));
        double& v = t.data[static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c)];
        v = std::max(v, std::exp(-d2 / (2.0 * sigma * sigma)));
      }
    }
  }
  return t;
}

const char* to_string(ClsDistillMode m) {
  switch (m) {
    case ClsDistillMode::None: return "none";
    case ClsDistillMode::Kl: return "kl";
    case ClsDistillMode::Contrastive: return "contrastive";
  }
  return "?";
}

ClsDistillMode cls_mode_from_string(const std::string& name) {
  for (auto m : {ClsDistillMode::None, ClsDistillMode::Kl, ClsDistillMode::Contrastive})
    if (name == to_string(m)) return m;
  throw std::invalid_argument("unknown cls mode '" + name + "'");
}

const char* to_string(CriticObjective o) {
  return o == CriticObjective::InfoNce ? "infonce" : "cosine";
}

CriticObjective critic_objective_from_string(const std::string& name) {
  for (auto o : {CriticObjective::InfoNce, CriticObjective::PositiveCosine})
    if (name == to_string(o)) return o;
  throw std::invalid_argument("unknown critic objective '" + name + "'");
}

DistillConfig StepConfig::effective_distill() const {
  DistillConfig d = distill;
  if (cls_mode == ClsDistillMode::None) d.alpha = 0.0;
  d.use_contrastive_cls = cls_mode == ClsDistillMode::Contrastive;
  if (!box_distill) d.beta = 0.0;
  return d;
}

bool StepConfig::distillation_enabled() const {
  const DistillConfig d = effective_distill();
  return d.lambda_feat > 0.0 || d.alpha > 0.0 || d.beta > 0.0;
}

bool StepConfig::uses_adapter() const { return feature_adapter && distill.lambda_feat > 0.0; }

void StepConfig::validate() const {
  distill.validate();
  task.validate();
  if (!(learning_rate > 0.0)) throw std::invalid_argument("StepConfig: learning_rate must be > 0");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("StepConfig: clip_norm must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("StepConfig: momentum must be in [0, 1)");
  if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0)) {
    throw std::invalid_argument("StepConfig: final_lr_fraction must be in (0, 1]");
  }
}

double scheduled_learning_rate(const StepConfig& config, double progress) {
  const double p = std::clamp(progress, 0.0, 1.0);
  const double f = config.final_lr_fraction;
  return config.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

TrainState TrainState::init(const DetectorConfig& config, double tau, std::uint64_t seed) {
  Rng init_rng(mix_seed(seed, 1));
  Rng critic_rng(mix_seed(seed, 3));
  TrainState s{ToyDetector::init(config, init_rng),
               CriticHandle::init(config.feature_channels, tau, critic_rng),
               FeatureAdapter::identity(config.feature_channels),
               {},
               0,
               Rng(mix_seed(seed, 2)),
               0,
               {},
               0,
               {}};
  return s;
}

TeacherView teacher_view(const ToyTeacher& teacher, const Scene& scene) {
  Tape tape;
  const BoundWeights w = bind_weights(tape, teacher.model.weights, false);
  const DetectorOutput out = forward(teacher.model.config, w, scene.lidar_like, scene.grid);
  TeacherView v;
  v.features = out.features.values.value();
  v.objectness.reserve(out.objectness.numel());
  for (double x : out.objectness.value().data) v.objectness.push_back(1.0 / (1.0 + std::exp(-x)));
  for (const auto& st : out.stages) v.stages.push_back(st.to_prediction_set());
  return v;
}

NonFiniteLoss::NonFiniteLoss(const std::string& component, std::uint64_t step)
    : std::runtime_error("non-finite " + component + " at step " + std::to_string(step)),
      component_(component),
      step_(step) {}

StepLosses build_step_losses(Tape& tape, const BoundWeights& student, const CriticVars& critic,
                             const DetectorConfig& config, const Scene& scene, Modality modality,
                             const TeacherView* teacher, const StepConfig& step, const AdapterVars* adapter) {
  const DetectorOutput out = forward(config, student, input_of(scene, modality), scene.grid);
  const double extent = scene.grid.extent();
  StepLosses l;
  l.task = student_task_loss(out.stages, scene.gt_boxes, extent, step.task);
  if (step.task.proposal_weight > 0.0) {
    Var focal = ad::focal_heatmap_loss(out.objectness, objectness_target(scene.gt_boxes, scene.grid));
    l.task = ad::add(l.task, ad::scale(focal, step.task.proposal_weight));
  }
  l.feat = zero(tape);
  l.inst_cls = zero(tape);
  l.inst_box = zero(tape);
  const DistillConfig d = step.effective_distill();
  if (step.distillation_enabled()) {
    if (teacher == nullptr) throw std::invalid_argument("build_step_losses: distillation needs teacher outputs");
    if (teacher->stages.size() != out.stages.size()) {
      throw std::invalid_argument("build_step_losses: teacher and student stage counts differ");
    }
    const FeatureMap teacher_map(scene.grid, tape.constant(teacher->features));
    if (d.lambda_feat > 0.0) {
      MaskAux aux;
      aux.reference_points = out.stages.front().reference_points;
      aux.teacher_heatmap = teacher->objectness;
      const ForegroundMask mask = build_foreground_mask(scene.gt_boxes, scene.grid, d, step.mask, aux);
      if (step.uses_adapter() && adapter == nullptr) {
        throw std::invalid_argument("build_step_losses: feature_adapter is on but no adapter was bound");
      }
      l.feat = masked_feature_loss(step.uses_adapter() ? adapt_features(out.features, *adapter) : out.features,
                                   teacher_map, mask);
    }
    if (d.alpha > 0.0 || d.beta > 0.0) {
      std::optional<ContrastiveTerms> terms;
      if (d.use_contrastive_cls && d.alpha > 0.0) {
        std::vector<WorldPoint> anchors;
        for (const auto& st : out.stages)
          anchors.insert(anchors.end(), st.reference_points.begin(), st.reference_points.end());
        terms = ContrastiveTerms{critic_per_anchor(critic, out.features, teacher_map, anchors,
                                                   d.include_positive_in_denominator, step.critic_objective),
                                 0};
      }
      std::vector<Var> cls, box;
      std::size_t offset = 0;
      for (std::size_t s = 0; s < out.stages.size(); ++s) {
        const PredictionSet& t = teacher->stages[s];
        const PredictionSet snap = out.stages[s].to_prediction_set();
        const Assignment a = hungarian_assign(build_cost_matrix(t, snap, extent));
        const QualityWeights q = teacher_quality_weights(t, scene.gt_boxes, d, extent);
        if (terms) terms->offset = offset;
        const InstanceLoss il = instance_loss(t, out.stages[s], q, a, d, extent, terms ? &*terms : nullptr);
        cls.push_back(il.cls);
        box.push_back(il.box);
        offset += out.stages[s].size();
      }
      const double inv = 1.0 / static_cast<double>(out.stages.size());
      l.inst_cls = ad::scale(ad::sum_scalars(tape, cls), inv);
      l.inst_box = ad::scale(ad::sum_scalars(tape, box), inv);
    }
  }
  l.total = ad::add(ad::add(ad::add(l.task, ad::scale(l.feat, d.lambda_feat)), l.inst_cls), l.inst_box);
  return l;
}

LossReport distill_step(TrainState& state, const ToyTeacher& teacher, const Scene& scene, const StepConfig& config,
                        const TeacherView* cached) {
  if (!teacher.frozen) throw std::invalid_argument("distill_step: teacher must be frozen");
  std::optional<TeacherView> local;
  if (cached == nullptr && config.distillation_enabled()) {
    local = teacher_view(teacher, scene);
    cached = &*local;
  }
  return run_step(state, scene, Modality::Camera, config, cached);
}

LossReport task_step(TrainState& state, const Scene& scene, Modality modality, const StepConfig& config) {
  if (config.distillation_enabled()) throw std::invalid_argument("task_step: distillation weights must be zero");
  return run_step(state, scene, modality, config, nullptr);
}

void train(TrainState& state, std::span<const Scene> scenes, Modality modality, const StepConfig& config,
           std::size_t epochs, const ToyTeacher* teacher, std::span<const TeacherView> teacher_views,
           std::uint64_t stop_at_step) {
  config.validate();
  if (!teacher_views.empty() && teacher_views.size() != scenes.size()) {
    throw std::invalid_argument("train: one teacher view per scene required");
  }
  if (config.distillation_enabled() && teacher == nullptr) throw std::invalid_argument("train: distillation needs a teacher");
  if (scenes.empty()) {
    state.epoch = std::max(state.epoch, epochs);
    return;
  }
  while (state.epoch < epochs) {
    if (state.order.empty()) {
      state.order.resize(scenes.size());
      std::iota(state.order.begin(), state.order.end(), std::size_t{0});
      state.rng.shuffle(state.order);
      state.cursor = 0;
    }
    if (state.order.size() != scenes.size()) throw std::invalid_argument("train: saved scene order does not fit dataset");
    const double total = static_cast<double>(epochs * scenes.size());
    StepConfig current = config;
    while (state.cursor < state.order.size()) {
      if (state.step >= stop_at_step) return;
      const std::size_t i = state.order[state.cursor];
      current.learning_rate =
          scheduled_learning_rate(config, static_cast<double>(state.epoch * scenes.size() + state.cursor) / total);
      if (teacher != nullptr) {
        distill_step(state, *teacher, scenes[i], current, teacher_views.empty() ? nullptr : &teacher_views[i]);
      } else {
        task_step(state, scenes[i], modality, current);
      }
      ++state.cursor;
    }
    state.order.clear();
    state.cursor = 0;
    ++state.epoch;
  }
}

ToyTeacher train_teacher(std::span<const Scene> scenes, std::size_t epochs, std::uint64_t seed,
                         const DetectorConfig& config, const StepConfig& step) {
  StepConfig plain = step;
  plain.distill.lambda_feat = 0.0;
  plain.cls_mode = ClsDistillMode::None;
  plain.box_distill = false;
  TrainState state = TrainState::init(config, step.distill.tau, seed);
  train(state, scenes, Modality::Lidar, plain, epochs);
  return ToyTeacher{std::move(state.model), true};
}

std::vector<std::vector<Detection>> detect(const ToyDetector& model, std::span<const Scene> scenes, Modality modality) {
  std::vector<std::vector<Detection>> out;
  out.reserve(scenes.size());
  for (const Scene& s : scenes) {
    Tape tape;
    const BoundWeights w = bind_weights(tape, model.weights, false);
    const DetectorOutput o = forward(model.config, w, input_of(s, modality), s.grid);
    out.push_back(detections_from(o.stages.back().to_prediction_set(), static_cast<std::size_t>(model.config.num_classes)));
  }
  return out;
}

MetricReport evaluate_model(const ToyDetector& model, std::span<const Scene> scenes, Modality modality) {
  std::vector<std::vector<BevBox>> gts;
  gts.reserve(scenes.size());
  for (const Scene& s : scenes) gts.push_back(s.gt_boxes);
  return evaluate(detect(model, scenes, modality), gts, static_cast<std::size_t>(model.config.num_classes));
}

}  // namespace bevkd
