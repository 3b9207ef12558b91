#pragma once

// Task loss, teacher training, and the distillation training loop.

#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <span>
#include <string>
#include <vector>

#include "bevkd/contrastive_critic.hpp"
#include "bevkd/dense_distill.hpp"
#include "bevkd/detector.hpp"
#include "bevkd/eval_metrics.hpp"
#include "bevkd/rng.hpp"
#include "bevkd/scene.hpp"

namespace bevkd {

enum class Modality { Lidar, Camera };

const Tensor& input_of(const Scene& scene, Modality m);

struct TaskLossConfig {
  double box_weight = 5.0;
  double velocity_weight = 0.5;
  double background_weight = 1.0;
  double proposal_weight = 1.0;
  /// Velocity differences are divided by this before the L1.
  double velocity_scale = 10.0;

  void validate() const;
  bool operator==(const TaskLossConfig&) const = default;
};

/// Set-based detection loss, averaged over stages. Per stage, predictions
/// are Hungarian-matched to the ground truth (one-hot classes) under the
/// pairwise match cost; matched queries pay cross-entropy plus
/// box_weight * normalized-box L1 plus velocity_weight * velocity L1,
/// unmatched queries pay background_weight * background cross-entropy; the
/// stage sum is divided by max(1, number of ground-truth boxes).
Var student_task_loss(std::span<const StagePredictions> stages, std::span<const BevBox> gt_boxes, double extent,
                      const TaskLossConfig& config);

/// Objectness target: a unit-peak Gaussian (sigma in cells) at the cell
/// nearest to each box center, merged by pointwise max.
Tensor objectness_target(std::span<const BevBox> gt_boxes, const BevGrid& grid, double sigma = 1.0);

struct LossReport {
  double task_loss = 0.0;
  double feat_loss = 0.0;
  double inst_cls_loss = 0.0;
  double inst_box_loss = 0.0;
  double total = 0.0;

  bool operator==(const LossReport&) const = default;
};

enum class ClsDistillMode { None, Kl, Contrastive };
const char* to_string(ClsDistillMode m);
ClsDistillMode cls_mode_from_string(const std::string& name);
const char* to_string(CriticObjective o);
CriticObjective critic_objective_from_string(const std::string& name);

/// Everything a single optimisation step needs besides the data.
struct StepConfig {
  DistillConfig distill;
  MaskStrategy mask = MaskStrategy::GtHeatmap;
  ClsDistillMode cls_mode = ClsDistillMode::Contrastive;
  bool box_distill = true;
  CriticObjective critic_objective = CriticObjective::InfoNce;
  TaskLossConfig task;
  double learning_rate = 0.01;
  double clip_norm = 10.0;
  double momentum = 0.0;
  /// Learning rate at the end of train() relative to the start, reached by
  /// a half-cosine; 1 keeps it constant.
  double final_lr_fraction = 1.0;
  /// Imitate the teacher through a trainable 1x1 student-side adapter.
  bool feature_adapter = true;

  /// DistillConfig with alpha / beta / use_contrastive_cls resolved from
  /// the mode switches.
  DistillConfig effective_distill() const;
  bool distillation_enabled() const;
  /// True when the feature loss is active and goes through the adapter.
  bool uses_adapter() const;
  void validate() const;
};

/// Learning rate at training progress in [0, 1].
double scheduled_learning_rate(const StepConfig& config, double progress);

struct SgdState {
  /// Momentum buffers by parameter name; empty with plain SGD.
  std::map<std::string, std::vector<double>> velocity;
};

struct TrainState {
  ToyDetector model;
  CriticHandle critic;
  FeatureAdapter adapter;
  SgdState optimizer;
  std::uint64_t step = 0;
  Rng rng;
  std::size_t epoch = 0;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::vector<LossReport> history;

  static TrainState init(const DetectorConfig& config, double tau, std::uint64_t seed);
};

/// Teacher outputs for one scene, detached.
struct TeacherView {
  Tensor features;
  std::vector<double> objectness;
  std::vector<PredictionSet> stages;
};

TeacherView teacher_view(const ToyTeacher& teacher, const Scene& scene);

/// Thrown when a loss component becomes non-finite.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& component, std::uint64_t step);
  const std::string& component() const { return component_; }
  std::uint64_t step() const { return step_; }

 private:
  std::string component_;
  std::uint64_t step_;
};

struct StepLosses {
  Var task, feat, inst_cls, inst_box, total;
};

/// Builds every loss term of one step on `tape` without updating anything.
/// `teacher` may be null only when distillation is disabled; `adapter` is
/// required when step.uses_adapter().
StepLosses build_step_losses(Tape& tape, const BoundWeights& student, const CriticVars& critic,
                             const DetectorConfig& config, const Scene& scene, Modality modality,
                             const TeacherView* teacher, const StepConfig& step,
                             const AdapterVars* adapter = nullptr);

/// One SGD step on the student (and critic) from the camera_like input; the
/// teacher is only read.
LossReport distill_step(TrainState& state, const ToyTeacher& teacher, const Scene& scene, const StepConfig& config,
                        const TeacherView* cached = nullptr);

/// One SGD step with the task loss only.
LossReport task_step(TrainState& state, const Scene& scene, Modality modality, const StepConfig& config);

/// Runs epochs until `state.epoch == epochs`, shuffling the scene order at
/// each epoch start with state.rng. `teacher_views` (one per scene) may be
/// empty, in which case teacher outputs are computed on the fly. Returns
/// early once state.step reaches `stop_at_step`; calling again with the same
/// arguments resumes.
void train(TrainState& state, std::span<const Scene> scenes, Modality modality, const StepConfig& config,
           std::size_t epochs, const ToyTeacher* teacher = nullptr,
           std::span<const TeacherView> teacher_views = {},
           std::uint64_t stop_at_step = std::numeric_limits<std::uint64_t>::max());

ToyTeacher train_teacher(std::span<const Scene> scenes, std::size_t epochs, std::uint64_t seed,
                         const DetectorConfig& config, const StepConfig& step);

/// Final-stage detections per scene.
std::vector<std::vector<Detection>> detect(const ToyDetector& model, std::span<const Scene> scenes, Modality modality);

MetricReport evaluate_model(const ToyDetector& model, std::span<const Scene> scenes, Modality modality);

}  // namespace bevkd
