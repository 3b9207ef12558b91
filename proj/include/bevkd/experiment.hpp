#pragma once

// Run configuration, single runs, ablation sweeps and their result files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevkd/checkpoint.hpp"
#include "bevkd/training.hpp"

namespace bevkd {

/// Flat key/value run configuration. Unknown keys are rejected.
struct RunConfig {
  // data
  std::string train_data;  // dataset file; generated when empty
  std::string eval_data;
  std::uint64_t train_seed = 1;
  std::uint64_t eval_seed = 2;
  std::size_t train_count = 400;
  std::size_t eval_count = 100;
  GenerationSpec generation;
  // teacher
  std::string teacher_checkpoint;  // trained in-process when empty
  std::size_t teacher_epochs = 12;
  std::uint64_t teacher_seed = 99;
  /// Required toy-NDS gain of the trained teacher over its initialization.
  double teacher_margin = 0.30;
  // student
  std::size_t epochs = 12;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  StepConfig step;
  DetectorConfig detector;
  // output
  std::string output_dir;
  std::string label = "run";

  RunConfig();

  /// Sets one key from its textual value.
  void set(const std::string& key, const std::string& value);
  /// Applies every key of a flat JSON object.
  void apply(const Json& j);
  Json to_json() const;
  static RunConfig from_json(const Json& j);
  static RunConfig load(const std::filesystem::path& path);
  static std::vector<std::string> keys();
  void validate() const;
};

struct ExperimentData {
  Dataset train;
  Dataset eval;
};

ExperimentData load_data(const RunConfig& config);

class TeacherBelowFloor : public std::runtime_error {
 public:
  TeacherBelowFloor(double initial_nds, double trained_nds, double margin);
  double initial_nds, trained_nds, margin;
};

struct TeacherResult {
  ToyTeacher teacher;
  MetricReport metrics;
  std::optional<MetricReport> initial_metrics;  // absent when loaded
  bool loaded = false;
};

/// Trains a teacher on the lidar_like inputs and checks the convergence
/// floor (skipped for zero epochs).
TeacherResult train_checked_teacher(const RunConfig& config, const ExperimentData& data, std::ostream* log = nullptr);

/// Loads config.teacher_checkpoint (which must exist) when set, otherwise
/// trains one.
TeacherResult obtain_teacher(const RunConfig& config, const ExperimentData& data, std::ostream* log = nullptr);

/// One labelled cell of a sweep.
struct Cell {
  std::string label;
  RunConfig config;
};

struct RunResult {
  std::string run_id;
  std::string label;
  std::uint64_t seed = 0;
  MetricReport metrics;
  std::vector<LossReport> epoch_means;
  std::string weight_hash;
  TrainState state;
};

struct CellSummary {
  std::string label;
  double nds_mean = 0.0, nds_std = 0.0;
  double map_mean = 0.0, map_std = 0.0;
};

struct ExperimentRecord {
  std::string name;
  Json config;
  std::string teacher_hash;
  MetricReport teacher_metrics;
  std::vector<RunResult> runs;
  std::vector<CellSummary> summary;

  const CellSummary& cell(const std::string& label) const;
  Json to_json() const;
  std::string to_csv() const;
};

/// Trains one student per seed of `cell.config` against a shared teacher.
std::vector<RunResult> run_cell(const Cell& cell, const std::string& prefix, const ExperimentData& data,
                                const ToyTeacher& teacher, std::span<const TeacherView> views,
                                std::ostream* log = nullptr);

/// Every seed of a single configuration.
ExperimentRecord run_experiment(const RunConfig& config, std::ostream* log = nullptr);

/// Ablation sweeps: "components", "mask", "loss", "critic".
std::vector<std::string> ablation_axes();
std::vector<Cell> ablation_cells(const std::string& axis, const RunConfig& base);
ExperimentRecord run_ablation(const std::string& axis, const RunConfig& base, std::ostream* log = nullptr);

/// Writes <dir>/<name>.json and <dir>/<name>.csv.
void write_record(const std::filesystem::path& dir, const ExperimentRecord& record);

/// Mean and sample standard deviation (n - 1); the deviation is 0 for n < 2.
std::pair<double, double> mean_std(std::span<const double> values);

}  // namespace bevkd
