#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "bevkd/experiment.hpp"

namespace bevkd {
namespace {

namespace fs = std::filesystem;

RunConfig tiny_config() {
  RunConfig c;
  c.train_count = 6;
  c.eval_count = 3;
  c.teacher_epochs = 1;
  c.teacher_margin = -1.0;
  c.epochs = 1;
  c.seeds = {0};
  c.output_dir = (fs::temp_directory_path() / "bevkd_unit" / "runs").string();
  return c;
}

TEST(RunConfig, DefaultsMatchDistillConfig) {
  const RunConfig c;
  EXPECT_EQ(c.step.distill, DistillConfig{});
  const Json j = c.to_json();
  EXPECT_EQ(j.at("sigma"), 2.0);
  EXPECT_EQ(j.at("gamma"), 0.5);
  EXPECT_EQ(j.at("alpha"), 1.0);
  EXPECT_EQ(j.at("beta"), 0.25);
  EXPECT_EQ(j.at("tau"), 0.07);
  EXPECT_EQ(j.at("lambda_feat"), 1.0);
  EXPECT_EQ(j.at("include_positive_in_denominator"), true);
  EXPECT_EQ(j.at("mask_strategy"), "gt_heatmap");
  EXPECT_EQ(j.at("cls_mode"), "contrastive");
  EXPECT_EQ(j.at("box_distill"), true);
  EXPECT_EQ(j.at("feature_adapter"), true);
}

TEST(RunConfig, UnknownKeyIsNamed) {
  try {
    RunConfig::from_json(Json{{"epochs", 2}, {"lambda_fet", 1.0}});
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("lambda_fet"), std::string::npos);
  }
  RunConfig c;
  EXPECT_THROW(c.set("no_such_key", "1"), std::invalid_argument);
}

TEST(RunConfig, WrongTypesRejected) {
  EXPECT_THROW(RunConfig::from_json(Json{{"epochs", -1}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json(Json{{"epochs", "3"}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json(Json{{"box_distill", 1}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json(Json{{"seeds", 3}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json(Json{{"mask_strategy", "nearest"}}), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json(Json::array()), std::invalid_argument);
  RunConfig c;
  EXPECT_THROW(c.set("alpha", "lots"), std::invalid_argument);
}

TEST(RunConfig, TextOverrides) {
  RunConfig c;
  c.set("seeds", "4,5,6");
  c.set("mask_strategy", "gt_center");
  c.set("cls_mode", "kl");
  c.set("box_distill", "false");
  c.set("lambda_feat", "0.25");
  c.set("num_classes", "3");
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{4, 5, 6}));
  EXPECT_EQ(c.step.mask, MaskStrategy::GtCenter);
  EXPECT_EQ(c.step.cls_mode, ClsDistillMode::Kl);
  EXPECT_FALSE(c.step.box_distill);
  EXPECT_EQ(c.step.distill.lambda_feat, 0.25);
  EXPECT_EQ(c.detector.num_classes, 3);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c;
  c.set("seeds", "9");
  c.set("critic_objective", "cosine");
  c.set("final_lr_fraction", "0.2");
  const RunConfig back = RunConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

TEST(RunConfig, InvalidValuesFailValidation) {
  RunConfig c;
  c.seeds.clear();
  EXPECT_THROW(c.validate(), std::invalid_argument);
  RunConfig d;
  d.set("tau", "0");
  EXPECT_THROW(d.validate(), std::invalid_argument);
}

TEST(MeanStd, SampleDeviation) {
  const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
  const auto [m, s] = mean_std(v);
  EXPECT_DOUBLE_EQ(m, 2.5);
  EXPECT_NEAR(s, std::sqrt(5.0 / 3.0), 1e-15);
  const std::vector<double> one{0.3};
  EXPECT_EQ(mean_std(one).second, 0.0);
}

TEST(Ablation, AxisRowStructure) {
  const RunConfig base;
  const auto labels = [&](const std::string& axis) {
    std::vector<std::string> out;
    for (const Cell& c : ablation_cells(axis, base)) out.push_back(c.label);
    return out;
  };
  EXPECT_EQ(labels("components"), (std::vector<std::string>{"baseline", "dense", "sparse", "combined"}));
  EXPECT_EQ(labels("mask"),
            (std::vector<std::string>{"baseline", "gt_heatmap", "gt_center", "query_center", "pred_heatmap"}));
  EXPECT_EQ(labels("loss").size(), 5u);
  EXPECT_EQ(labels("critic"), (std::vector<std::string>{"none", "cosine-pos", "kl-pos", "infonce"}));
  EXPECT_THROW(ablation_cells("table9", base), std::invalid_argument);
}

TEST(Ablation, ComponentCellsToggleTheRightTerms) {
  const auto cells = ablation_cells("components", RunConfig{});
  EXPECT_FALSE(cells[0].config.step.distillation_enabled());
  EXPECT_GT(cells[1].config.step.distill.lambda_feat, 0.0);
  EXPECT_EQ(cells[1].config.step.effective_distill().alpha, 0.0);
  EXPECT_EQ(cells[1].config.step.effective_distill().beta, 0.0);
  EXPECT_EQ(cells[2].config.step.distill.lambda_feat, 0.0);
  EXPECT_GT(cells[2].config.step.effective_distill().alpha, 0.0);
  EXPECT_GT(cells[2].config.step.effective_distill().beta, 0.0);
  EXPECT_GT(cells[3].config.step.distill.lambda_feat, 0.0);
  EXPECT_GT(cells[3].config.step.effective_distill().alpha, 0.0);
}

TEST(Experiment, IdenticalConfigIdenticalRecord) {
  const RunConfig c = tiny_config();
  const ExperimentRecord a = run_experiment(c);
  const ExperimentRecord b = run_experiment(c);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(a.to_csv(), b.to_csv());
  ASSERT_EQ(a.runs.size(), 1u);
  EXPECT_EQ(a.runs[0].epoch_means.size(), 1u);
  EXPECT_EQ(a.to_json().at("config"), c.to_json());
}

TEST(Experiment, StrategiesBothReported) {
  RunConfig c = tiny_config();
  c.set("cls_mode", "none");
  c.set("box_distill", "false");
  const auto mask_cells = ablation_cells("mask", c);
  std::vector<Cell> cells;
  for (const Cell& cell : mask_cells)
    if (cell.label == "gt_center" || cell.label == "gt_heatmap") cells.push_back(cell);
  ASSERT_EQ(cells.size(), 2u);
  const ExperimentData data = load_data(c);
  const TeacherResult t = obtain_teacher(c, data);
  std::vector<TeacherView> views;
  for (const Scene& s : data.train.scenes) views.push_back(teacher_view(t.teacher, s));
  ExperimentRecord rec;
  rec.name = "masks";
  for (const Cell& cell : cells)
    for (auto& r : run_cell(cell, "masks", data, t.teacher, views)) rec.runs.push_back(std::move(r));
  const std::string csv = rec.to_csv();
  EXPECT_NE(csv.find("masks/gt_center/seed0,gt_center,0,"), std::string::npos);
  EXPECT_NE(csv.find("masks/gt_heatmap/seed0,gt_heatmap,0,"), std::string::npos);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "run_id,strategy,seed,toy_nds,toy_map,mate,mase,maoe,mave,final_total_loss");
}

TEST(Experiment, SingleCellAblationMatchesDistill) {
  RunConfig c = tiny_config();
  c.label = "combined";
  const ExperimentRecord single = run_experiment(c);
  const ExperimentRecord sweep = run_ablation("components", c);
  const auto& combined = sweep.cell("combined");
  EXPECT_EQ(combined.nds_mean, single.cell("combined").nds_mean);
  bool found = false;
  for (const RunResult& r : sweep.runs)
    if (r.label == "combined") found = found || r.weight_hash == single.runs[0].weight_hash;
  EXPECT_TRUE(found);
}

TEST(Experiment, MissingTeacherCheckpointFails) {
  RunConfig c = tiny_config();
  c.teacher_checkpoint = (fs::temp_directory_path() / "bevkd_unit" / "absent_teacher.json").string();
  fs::remove(c.teacher_checkpoint);
  EXPECT_THROW(run_experiment(c), std::runtime_error);
}

TEST(Experiment, SavedTeacherIsReused) {
  RunConfig c = tiny_config();
  const ExperimentData data = load_data(c);
  const TeacherResult t = train_checked_teacher(c, data);
  c.teacher_checkpoint = (fs::temp_directory_path() / "bevkd_unit" / "tiny_teacher.json").string();
  save_teacher(c.teacher_checkpoint, t.teacher, c.to_json(), t.metrics);
  const TeacherResult loaded = obtain_teacher(c, data);
  EXPECT_TRUE(loaded.loaded);
  EXPECT_EQ(loaded.teacher.model.weight_hash(), t.teacher.model.weight_hash());
  EXPECT_EQ(loaded.metrics, t.metrics);
}

TEST(Experiment, TeacherBelowFloorIsReported) {
  RunConfig c = tiny_config();
  c.teacher_margin = 2.0;
  const ExperimentData data = load_data(c);
  try {
    train_checked_teacher(c, data);
    FAIL() << "expected floor failure";
  } catch (const TeacherBelowFloor& e) {
    EXPECT_EQ(e.margin, 2.0);
    EXPECT_LT(e.trained_nds - e.initial_nds, 2.0);
  }
  c.teacher_epochs = 0;
  EXPECT_NO_THROW(train_checked_teacher(c, data));
}

TEST(Experiment, RecordFilesWritten) {
  const RunConfig c = tiny_config();
  const ExperimentRecord rec = run_experiment(c);
  write_record(c.output_dir, rec);
  const fs::path json = fs::path(c.output_dir) / "run.json";
  const fs::path csv = fs::path(c.output_dir) / "run.csv";
  ASSERT_TRUE(fs::exists(json));
  ASSERT_TRUE(fs::exists(csv));
  std::ifstream in(json);
  const Json j = Json::parse(in);
  EXPECT_EQ(j.at("runs").size(), 1u);
  EXPECT_TRUE(j.at("runs")[0].contains("epoch_losses"));
}

}  // namespace
}  // namespace bevkd
