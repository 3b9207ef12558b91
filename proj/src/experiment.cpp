#include "bevkd/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <tuple>

namespace bevkd {
namespace {

struct KeyDef {
  const char* name;
  std::function<Json(const RunConfig&)> get;
  std::function<void(RunConfig&, const Json&)> put;
};

[[noreturn]] void bad_value(const std::string& key, const Json& v, const char* want) {
  throw std::invalid_argument("config key '" + key + "': expected " + want + ", got " + v.dump());
}

std::uint64_t as_uint(const std::string& key, const Json& v) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) bad_value(key, v, "a non-negative integer");
  return v.get<std::uint64_t>();
}

int as_int(const std::string& key, const Json& v) {
  if (!v.is_number_integer()) bad_value(key, v, "an integer");
  return v.get<int>();
}

double as_double(const std::string& key, const Json& v) {
  if (!v.is_number()) bad_value(key, v, "a number");
  return v.get<double>();
}

bool as_bool(const std::string& key, const Json& v) {
  if (!v.is_boolean()) bad_value(key, v, "true or false");
  return v.get<bool>();
}

std::string as_string(const std::string& key, const Json& v) {
  if (!v.is_string()) bad_value(key, v, "a string");
  return v.get<std::string>();
}

#define BEVKD_KEY(NAME, FIELD, CONV)                                                   \
  KeyDef {                                                                            \
    NAME, [](const RunConfig& c) { return Json(c.FIELD); },                           \
        [](RunConfig& c, const Json& v) { c.FIELD = static_cast<decltype(c.FIELD)>(CONV(NAME, v)); } \
  }

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> table = {
      BEVKD_KEY("train_data", train_data, as_string),
      BEVKD_KEY("eval_data", eval_data, as_string),
      BEVKD_KEY("train_seed", train_seed, as_uint),
      BEVKD_KEY("eval_seed", eval_seed, as_uint),
      BEVKD_KEY("train_count", train_count, as_uint),
      BEVKD_KEY("eval_count", eval_count, as_uint),
      BEVKD_KEY("min_boxes", generation.min_boxes, as_int),
      BEVKD_KEY("max_boxes", generation.max_boxes, as_int),
      KeyDef{"num_classes", [](const RunConfig& c) { return Json(c.generation.num_classes); },
             [](RunConfig& c, const Json& v) {
               c.generation.num_classes = as_int("num_classes", v);
               c.detector.num_classes = c.generation.num_classes;
             }},
      BEVKD_KEY("dt", generation.dt, as_double),
      BEVKD_KEY("noise_std", generation.noise_std, as_double),
      BEVKD_KEY("depth_blur", generation.depth_blur, as_double),
      BEVKD_KEY("background_level", generation.background_level, as_double),
      BEVKD_KEY("lidar_dropout", generation.lidar_dropout, as_double),
      BEVKD_KEY("lidar_noise_rate", generation.lidar_noise_rate, as_double),
      BEVKD_KEY("teacher_checkpoint", teacher_checkpoint, as_string),
      BEVKD_KEY("teacher_epochs", teacher_epochs, as_uint),
      BEVKD_KEY("teacher_seed", teacher_seed, as_uint),
      BEVKD_KEY("teacher_margin", teacher_margin, as_double),
      BEVKD_KEY("epochs", epochs, as_uint),
      KeyDef{"seeds", [](const RunConfig& c) { return Json(c.seeds); },
             [](RunConfig& c, const Json& v) {
               if (!v.is_array()) bad_value("seeds", v, "a list of non-negative integers");
               std::vector<std::uint64_t> seeds;
               for (const auto& e : v) seeds.push_back(as_uint("seeds", e));
               c.seeds = std::move(seeds);
             }},
      BEVKD_KEY("learning_rate", step.learning_rate, as_double),
      BEVKD_KEY("clip_norm", step.clip_norm, as_double),
      BEVKD_KEY("momentum", step.momentum, as_double),
      BEVKD_KEY("final_lr_fraction", step.final_lr_fraction, as_double),
      BEVKD_KEY("box_weight", step.task.box_weight, as_double),
      BEVKD_KEY("velocity_weight", step.task.velocity_weight, as_double),
      BEVKD_KEY("background_weight", step.task.background_weight, as_double),
      BEVKD_KEY("proposal_weight", step.task.proposal_weight, as_double),
      BEVKD_KEY("velocity_scale", step.task.velocity_scale, as_double),
      BEVKD_KEY("sigma", step.distill.sigma, as_double),
      BEVKD_KEY("gamma", step.distill.gamma, as_double),
      BEVKD_KEY("alpha", step.distill.alpha, as_double),
      BEVKD_KEY("beta", step.distill.beta, as_double),
      BEVKD_KEY("tau", step.distill.tau, as_double),
      BEVKD_KEY("lambda_feat", step.distill.lambda_feat, as_double),
      BEVKD_KEY("feature_adapter", step.feature_adapter, as_bool),
      BEVKD_KEY("include_positive_in_denominator", step.distill.include_positive_in_denominator, as_bool),
      KeyDef{"mask_strategy", [](const RunConfig& c) { return Json(to_string(c.step.mask)); },
             [](RunConfig& c, const Json& v) { c.step.mask = mask_strategy_from_string(as_string("mask_strategy", v)); }},
      KeyDef{"cls_mode", [](const RunConfig& c) { return Json(to_string(c.step.cls_mode)); },
             [](RunConfig& c, const Json& v) { c.step.cls_mode = cls_mode_from_string(as_string("cls_mode", v)); }},
      BEVKD_KEY("box_distill", step.box_distill, as_bool),
      KeyDef{"critic_objective", [](const RunConfig& c) { return Json(to_string(c.step.critic_objective)); },
             [](RunConfig& c, const Json& v) {
               c.step.critic_objective = critic_objective_from_string(as_string("critic_objective", v));
             }},
      BEVKD_KEY("output_dir", output_dir, as_string),
      BEVKD_KEY("label", label, as_string),
  };
  return table;
}

#undef BEVKD_KEY

const KeyDef& find_key(const std::string& key) {
  for (const KeyDef& k : key_table())
    if (key == k.name) return k;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

Json parse_text_value(const Json& current, const std::string& key, const std::string& text) {
  if (current.is_string()) return Json(text);
  if (current.is_array()) {
    Json arr = Json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      try {
        arr.push_back(Json::parse(item));
      } catch (const Json::parse_error&) {
        bad_value(key, Json(text), "a comma-separated list of integers");
      }
    }
    return arr;
  }
  try {
    return Json::parse(text);
  } catch (const Json::parse_error&) {
    bad_value(key, Json(text), current.is_boolean() ? "true or false" : "a number");
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<LossReport> epoch_means(const std::vector<LossReport>& history, std::size_t per_epoch) {
  std::vector<LossReport> out;
  if (per_epoch == 0) return out;
  for (std::size_t start = 0; start + per_epoch <= history.size(); start += per_epoch) {
    LossReport m;
    for (std::size_t i = start; i < start + per_epoch; ++i) {
      m.task_loss += history[i].task_loss;
      m.feat_loss += history[i].feat_loss;
      m.inst_cls_loss += history[i].inst_cls_loss;
      m.inst_box_loss += history[i].inst_box_loss;
      m.total += history[i].total;
    }
    const double n = static_cast<double>(per_epoch);
    m.task_loss /= n;
    m.feat_loss /= n;
    m.inst_cls_loss /= n;
    m.inst_box_loss /= n;
    m.total /= n;
    out.push_back(m);
  }
  return out;
}

std::vector<CellSummary> summarize(const std::vector<RunResult>& runs) {
  std::vector<CellSummary> out;
  std::vector<std::string> order;
  for (const RunResult& r : runs)
    if (std::find(order.begin(), order.end(), r.label) == order.end()) order.push_back(r.label);
  for (const std::string& label : order) {
    std::vector<double> nds, map;
    for (const RunResult& r : runs) {
      if (r.label != label) continue;
      nds.push_back(r.metrics.toy_nds);
      map.push_back(r.metrics.toy_map);
    }
    CellSummary s;
    s.label = label;
    std::tie(s.nds_mean, s.nds_std) = mean_std(nds);
    std::tie(s.map_mean, s.map_std) = mean_std(map);
    out.push_back(s);
  }
  return out;
}

std::vector<TeacherView> teacher_views(const ToyTeacher& teacher, std::span<const Scene> scenes) {
  std::vector<TeacherView> views;
  views.reserve(scenes.size());
  for (const Scene& s : scenes) views.push_back(teacher_view(teacher, s));
  return views;
}

ExperimentRecord run_cells(const std::string& name, const RunConfig& base, const std::vector<Cell>& cells,
                           std::ostream* log) {
  base.validate();
  for (const Cell& c : cells) c.config.validate();
  const ExperimentData data = load_data(base);
  const TeacherResult teacher = obtain_teacher(base, data, log);
  bool any_distill = false;
  for (const Cell& c : cells) any_distill = any_distill || c.config.step.distillation_enabled();
  std::vector<TeacherView> views;
  if (any_distill) views = teacher_views(teacher.teacher, data.train.scenes);

  ExperimentRecord rec;
  rec.name = name;
  rec.config = base.to_json();
  rec.teacher_hash = teacher.teacher.model.weight_hash();
  rec.teacher_metrics = teacher.metrics;
  for (const Cell& c : cells) {
    auto runs = run_cell(c, name, data, teacher.teacher, views, log);
    for (auto& r : runs) rec.runs.push_back(std::move(r));
  }
  rec.summary = summarize(rec.runs);
  return rec;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

RunConfig::RunConfig() {
  step.learning_rate = 0.03;
  step.final_lr_fraction = 0.05;
  const char* out = std::getenv("BEVKD_OUT_DIR");
  output_dir = (out != nullptr && *out != '\0') ? out : "bevkd_out";
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const KeyDef& k = find_key(key);
  k.put(*this, parse_text_value(k.get(*this), key, value));
}

void RunConfig::apply(const Json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, value] : j.items()) find_key(key).put(*this, value);
}

Json RunConfig::to_json() const {
  Json j = Json::object();
  for (const KeyDef& k : key_table()) j[k.name] = k.get(*this);
  return j;
}

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  c.apply(j);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const KeyDef& k : key_table()) out.emplace_back(k.name);
  return out;
}

void RunConfig::validate() const {
  generation.validate();
  detector.validate();
  step.validate();
  if (detector.num_classes != generation.num_classes) throw std::invalid_argument("config: detector and data class counts differ");
  if (detector.input_channels != kInputChannels) throw std::invalid_argument("config: detector input channels must match the data");
  if (train_data.empty() && train_count == 0) throw std::invalid_argument("config: train_count must be positive");
  if (eval_data.empty() && eval_count == 0) throw std::invalid_argument("config: eval_count must be positive");
  if (seeds.empty()) throw std::invalid_argument("config: seeds must not be empty");
  if (!std::isfinite(teacher_margin)) throw std::invalid_argument("config: teacher_margin must be finite");
  if (label.empty()) throw std::invalid_argument("config: label must not be empty");
}

ExperimentData load_data(const RunConfig& c) {
  ExperimentData d;
  d.train = c.train_data.empty() ? generate_dataset(c.train_seed, c.train_count, default_grid(), c.generation)
                                 : read_dataset(c.train_data);
  d.eval = c.eval_data.empty() ? generate_dataset(c.eval_seed, c.eval_count, default_grid(), c.generation)
                               : read_dataset(c.eval_data);
  if (!(d.train.grid == d.eval.grid)) throw std::invalid_argument("train and eval datasets use different grids");
  if (d.train.scenes.empty() || d.eval.scenes.empty()) throw std::invalid_argument("datasets must not be empty");
  return d;
}

TeacherBelowFloor::TeacherBelowFloor(double initial, double trained, double m)
    : std::runtime_error("teacher did not converge: toy-NDS " + fmt(trained) + " vs " + fmt(initial) +
                         " at initialization, required gain " + fmt(m)),
      initial_nds(initial),
      trained_nds(trained),
      margin(m) {}

TeacherResult train_checked_teacher(const RunConfig& c, const ExperimentData& data, std::ostream* log) {
  TeacherResult r;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainState init = TrainState::init(c.detector, c.step.distill.tau, c.teacher_seed);
  r.initial_metrics = evaluate_model(init.model, data.eval.scenes, Modality::Lidar);
  r.teacher = train_teacher(data.train.scenes, c.teacher_epochs, c.teacher_seed, c.detector, c.step);
  r.metrics = evaluate_model(r.teacher.model, data.eval.scenes, Modality::Lidar);
  if (log) {
    *log << "teacher trained " << c.teacher_epochs << " epochs toy_nds " << fmt(r.metrics.toy_nds) << " (init "
         << fmt(r.initial_metrics->toy_nds) << ", " << fmt(seconds_since(t0)) << " s)\n";
  }
  if (c.teacher_epochs > 0 && r.metrics.toy_nds - r.initial_metrics->toy_nds < c.teacher_margin) {
    throw TeacherBelowFloor(r.initial_metrics->toy_nds, r.metrics.toy_nds, c.teacher_margin);
  }
  return r;
}

TeacherResult obtain_teacher(const RunConfig& c, const ExperimentData& data, std::ostream* log) {
  if (c.teacher_checkpoint.empty()) return train_checked_teacher(c, data, log);
  if (!std::filesystem::exists(c.teacher_checkpoint)) {
    throw std::runtime_error("teacher checkpoint " + c.teacher_checkpoint + " does not exist");
  }
  TeacherResult r;
  r.teacher = load_teacher(c.teacher_checkpoint);
  if (!(r.teacher.model.config == c.detector)) throw std::invalid_argument("teacher checkpoint detector config differs");
  r.loaded = true;
  r.metrics = evaluate_model(r.teacher.model, data.eval.scenes, Modality::Lidar);
  if (log) *log << "teacher loaded from " << c.teacher_checkpoint << " toy_nds " << fmt(r.metrics.toy_nds) << "\n";
  return r;
}

std::vector<RunResult> run_cell(const Cell& cell, const std::string& prefix, const ExperimentData& data,
                                const ToyTeacher& teacher, std::span<const TeacherView> views, std::ostream* log) {
  const RunConfig& c = cell.config;
  c.validate();
  const bool distill = c.step.distillation_enabled();
  std::vector<RunResult> out;
  for (std::uint64_t seed : c.seeds) {
    const auto t0 = std::chrono::steady_clock::now();
    RunResult r;
    r.label = cell.label;
    r.seed = seed;
    r.run_id = prefix + "/" + cell.label + "/seed" + std::to_string(seed);
    r.state = TrainState::init(c.detector, c.step.distill.tau, seed);
    train(r.state, data.train.scenes, Modality::Camera, c.step, c.epochs, distill ? &teacher : nullptr,
          distill ? views : std::span<const TeacherView>{});
    r.metrics = evaluate_model(r.state.model, data.eval.scenes, Modality::Camera);
    r.epoch_means = epoch_means(r.state.history, data.train.scenes.size());
    r.weight_hash = r.state.model.weight_hash();
    if (log) {
      *log << r.run_id << " toy_nds " << fmt(r.metrics.toy_nds) << " toy_map " << fmt(r.metrics.toy_map) << " ("
           << fmt(seconds_since(t0)) << " s)\n";
      log->flush();
    }
    out.push_back(std::move(r));
  }
  return out;
}

ExperimentRecord run_experiment(const RunConfig& config, std::ostream* log) {
  return run_cells(config.label, config, {Cell{config.label, config}}, log);
}

std::vector<std::string> ablation_axes() { return {"components", "mask", "loss", "critic"}; }

std::vector<Cell> ablation_cells(const std::string& axis, const RunConfig& base) {
  auto cell = [&](const std::string& label, double lambda, ClsDistillMode cls, bool box) {
    Cell c{label, base};
    c.config.step.distill.lambda_feat = lambda;
    c.config.step.cls_mode = cls;
    c.config.step.box_distill = box;
    c.config.label = label;
    return c;
  };
  const double lambda = base.step.distill.lambda_feat;
  const ClsDistillMode sparse_cls =
      base.step.cls_mode == ClsDistillMode::None ? ClsDistillMode::Contrastive : base.step.cls_mode;
  const auto None = ClsDistillMode::None;
  std::vector<Cell> cells;
  if (axis == "components") {
    cells.push_back(cell("baseline", 0.0, None, false));
    cells.push_back(cell("dense", lambda, None, false));
    cells.push_back(cell("sparse", 0.0, sparse_cls, true));
    cells.push_back(cell("combined", lambda, sparse_cls, true));
  } else if (axis == "mask") {
    cells.push_back(cell("baseline", 0.0, None, false));
    for (MaskStrategy m : {MaskStrategy::GtHeatmap, MaskStrategy::GtCenter, MaskStrategy::QueryCenter,
                           MaskStrategy::PredHeatmap}) {
      Cell c = cell(to_string(m), lambda, None, false);
      c.config.step.mask = m;
      cells.push_back(std::move(c));
    }
  } else if (axis == "loss") {
    cells.push_back(cell("baseline", 0.0, None, false));
    cells.push_back(cell("kl", 0.0, ClsDistillMode::Kl, false));
    cells.push_back(cell("l1", 0.0, None, true));
    cells.push_back(cell("kl+l1", 0.0, ClsDistillMode::Kl, true));
    Cell c = cell("infonce+l1", 0.0, ClsDistillMode::Contrastive, true);
    c.config.step.critic_objective = CriticObjective::InfoNce;
    cells.push_back(std::move(c));
  } else if (axis == "critic") {
    cells.push_back(cell("none", 0.0, None, false));
    Cell cos = cell("cosine-pos", 0.0, ClsDistillMode::Contrastive, false);
    cos.config.step.critic_objective = CriticObjective::PositiveCosine;
    cells.push_back(std::move(cos));
    cells.push_back(cell("kl-pos", 0.0, ClsDistillMode::Kl, false));
    Cell nce = cell("infonce", 0.0, ClsDistillMode::Contrastive, false);
    nce.config.step.critic_objective = CriticObjective::InfoNce;
    cells.push_back(std::move(nce));
  } else {
    throw std::invalid_argument("unknown ablation axis '" + axis + "' (components, mask, loss, critic)");
  }
  return cells;
}

ExperimentRecord run_ablation(const std::string& axis, const RunConfig& base, std::ostream* log) {
  return run_cells("ablation_" + axis, base, ablation_cells(axis, base), log);
}

const CellSummary& ExperimentRecord::cell(const std::string& label) const {
  for (const CellSummary& s : summary)
    if (s.label == label) return s;
  throw std::out_of_range("no cell labelled '" + label + "'");
}

Json ExperimentRecord::to_json() const {
  Json j;
  j["name"] = name;
  j["config"] = config;
  j["teacher"] = {{"weight_hash", teacher_hash}, {"metrics", metrics_to_json(teacher_metrics)}};
  Json runs_j = Json::array();
  for (const RunResult& r : runs) {
    Json losses = Json::array();
    for (const LossReport& l : r.epoch_means) losses.push_back(loss_report_to_json(l));
    runs_j.push_back({{"run_id", r.run_id},
                      {"label", r.label},
                      {"seed", r.seed},
                      {"metrics", metrics_to_json(r.metrics)},
                      {"weight_hash", r.weight_hash},
                      {"epoch_losses", std::move(losses)}});
  }
  j["runs"] = std::move(runs_j);
  Json sum = Json::array();
  for (const CellSummary& s : summary) {
    sum.push_back({{"label", s.label},
                   {"toy_nds_mean", s.nds_mean},
                   {"toy_nds_std", s.nds_std},
                   {"toy_map_mean", s.map_mean},
                   {"toy_map_std", s.map_std}});
  }
  j["summary"] = std::move(sum);
  return j;
}

std::string ExperimentRecord::to_csv() const {
  std::ostringstream out;
  out << "run_id,strategy,seed,toy_nds,toy_map,mate,mase,maoe,mave,final_total_loss\n";
  for (const RunResult& r : runs) {
    const MetricReport& m = r.metrics;
    out << r.run_id << ',' << r.label << ',' << r.seed << ',' << fmt(m.toy_nds) << ',' << fmt(m.toy_map) << ','
        << fmt(m.mate) << ',' << fmt(m.mase) << ',' << fmt(m.maoe) << ',' << fmt(m.mave) << ','
        << (r.epoch_means.empty() ? std::string("") : fmt(r.epoch_means.back().total)) << '\n';
  }
  return out.str();
}

void write_record(const std::filesystem::path& dir, const ExperimentRecord& record) {
  std::string stem = record.name;
  for (char& ch : stem)
    if (ch == '/' || ch == '+') ch = '_';
  write_text_file(dir / (stem + ".json"), record.to_json().dump(2) + "\n");
  write_text_file(dir / (stem + ".csv"), record.to_csv());
}

std::pair<double, double> mean_std(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

}  // namespace bevkd
