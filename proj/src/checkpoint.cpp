#include "bevkd/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bevkd {
namespace {

Json tensor_to_json(const Tensor& t) {
  Json j;
  j["shape"] = t.shape;
  j["data"] = t.data;
  return j;
}

Tensor tensor_from_json(const Json& j) {
  Tensor t(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  return t;
}

Json head_to_json(const ProjectionHead& h) {
  Json j;
  j["input_dim"] = h.input_dim;
  j["hidden_dim"] = h.hidden_dim;
  j["output_dim"] = h.output_dim;
  j["w1"] = tensor_to_json(h.w1);
  j["b1"] = tensor_to_json(h.b1);
  j["w2"] = tensor_to_json(h.w2);
  j["b2"] = tensor_to_json(h.b2);
  j["w3"] = tensor_to_json(h.w3);
  j["b3"] = tensor_to_json(h.b3);
  return j;
}

ProjectionHead head_from_json(const Json& j) {
  ProjectionHead h;
  h.input_dim = j.at("input_dim").get<std::size_t>();
  h.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  h.output_dim = j.at("output_dim").get<std::size_t>();
  h.w1 = tensor_from_json(j.at("w1"));
  h.b1 = tensor_from_json(j.at("b1"));
  h.w2 = tensor_from_json(j.at("w2"));
  h.b2 = tensor_from_json(j.at("b2"));
  h.w3 = tensor_from_json(j.at("w3"));
  h.b3 = tensor_from_json(j.at("b3"));
  return h;
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Json j = Json::parse(in);
  if (j.value("format_version", 0) != kCheckpointFormatVersion) {
    throw std::runtime_error("checkpoint " + path.string() + " has an unsupported format version");
  }
  return j;
}

}  // namespace

Json detector_to_json(const ToyDetector& model) {
  Json j;
  const DetectorConfig& c = model.config;
  j["config"] = {{"input_channels", c.input_channels}, {"hidden_channels", c.hidden_channels},
                 {"feature_channels", c.feature_channels}, {"num_queries", c.num_queries},
                 {"num_stages", c.num_stages}, {"embed_dim", c.embed_dim}, {"num_classes", c.num_classes}};
  Json w = Json::object();
  for (const auto& [name, t] : model.weights) w[name] = tensor_to_json(t);
  j["weights"] = std::move(w);
  return j;
}

ToyDetector detector_from_json(const Json& j) {
  ToyDetector d;
  const Json& c = j.at("config");
  d.config.input_channels = c.at("input_channels").get<std::size_t>();
  d.config.hidden_channels = c.at("hidden_channels").get<std::size_t>();
  d.config.feature_channels = c.at("feature_channels").get<std::size_t>();
  d.config.num_queries = c.at("num_queries").get<std::size_t>();
  d.config.num_stages = c.at("num_stages").get<std::size_t>();
  d.config.embed_dim = c.at("embed_dim").get<std::size_t>();
  d.config.num_classes = c.at("num_classes").get<int>();
  d.config.validate();
  for (const auto& [name, t] : j.at("weights").items()) d.weights[name] = tensor_from_json(t);
  // Shapes must agree with a freshly initialized model of the same config.
  Rng probe(0);
  const ToyDetector ref = ToyDetector::init(d.config, probe);
  if (ref.weights.size() != d.weights.size()) throw std::runtime_error("checkpoint: weight set does not match config");
  for (const auto& [name, t] : ref.weights) {
    auto it = d.weights.find(name);
    if (it == d.weights.end() || it->second.shape != t.shape) {
      throw std::runtime_error("checkpoint: weight " + name + " missing or misshapen");
    }
  }
  return d;
}

Json metrics_to_json(const MetricReport& m) {
  return {{"toy_nds", m.toy_nds}, {"toy_map", m.toy_map}, {"mate", m.mate},
          {"mase", m.mase},       {"maoe", m.maoe},       {"mave", m.mave}};
}

Json loss_report_to_json(const LossReport& r) {
  return {{"task_loss", r.task_loss}, {"feat_loss", r.feat_loss}, {"inst_cls_loss", r.inst_cls_loss},
          {"inst_box_loss", r.inst_box_loss}, {"total", r.total}};
}

Json train_state_to_json(const TrainState& s, const Json& config_echo) {
  Json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = "student";
  j["config"] = config_echo;
  j["model"] = detector_to_json(s.model);
  j["critic"] = {{"tau", s.critic.tau}, {"head_2d", head_to_json(s.critic.head_2d)},
                 {"head_3d", head_to_json(s.critic.head_3d)}};
  j["adapter"] = {{"weight", tensor_to_json(s.adapter.weight)}, {"bias", tensor_to_json(s.adapter.bias)}};
  Json vel = Json::object();
  for (const auto& [name, v] : s.optimizer.velocity) vel[name] = v;
  j["optimizer"] = {{"kind", "sgd"}, {"velocity", std::move(vel)}};
  j["rng_state"] = s.rng.state();
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["order"] = s.order;
  j["cursor"] = s.cursor;
  Json hist = Json::array();
  for (const auto& r : s.history)
    hist.push_back(Json::array({r.task_loss, r.feat_loss, r.inst_cls_loss, r.inst_box_loss, r.total}));
  j["history"] = std::move(hist);
  return j;
}

TrainState train_state_from_json(const Json& j) {
  if (j.value("kind", "") != "student") throw std::runtime_error("checkpoint is not a student checkpoint");
  TrainState s;
  s.model = detector_from_json(j.at("model"));
  const Json& c = j.at("critic");
  s.critic.tau = c.at("tau").get<double>();
  s.critic.head_2d = head_from_json(c.at("head_2d"));
  s.critic.head_3d = head_from_json(c.at("head_3d"));
  const Json& a = j.at("adapter");
  s.adapter = {tensor_from_json(a.at("weight")), tensor_from_json(a.at("bias"))};
  if (s.adapter.weight.shape != Shape{1, 1, s.model.config.feature_channels, s.model.config.feature_channels} ||
      s.adapter.bias.shape != Shape{s.model.config.feature_channels}) {
    throw std::runtime_error("checkpoint: adapter shape does not match the feature width");
  }
  for (const auto& [name, v] : j.at("optimizer").at("velocity").items()) {
    s.optimizer.velocity[name] = v.get<std::vector<double>>();
  }
  s.rng.set_state(j.at("rng_state").get<std::string>());
  s.step = j.at("step").get<std::uint64_t>();
  s.epoch = j.at("epoch").get<std::size_t>();
  s.order = j.at("order").get<std::vector<std::size_t>>();
  s.cursor = j.at("cursor").get<std::size_t>();
  for (const auto& r : j.at("history")) {
    const auto v = r.get<std::vector<double>>();
    if (v.size() != 5) throw std::runtime_error("checkpoint: malformed loss history");
    s.history.push_back({v[0], v[1], v[2], v[3], v[4]});
  }
  return s;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const Json& config_echo) {
  write_text_file(path, train_state_to_json(state, config_echo).dump());
}

TrainState load_checkpoint(const std::filesystem::path& path) { return train_state_from_json(read_json(path)); }

void save_teacher(const std::filesystem::path& path, const ToyTeacher& teacher, const Json& config_echo,
                  const std::optional<MetricReport>& metrics) {
  Json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["kind"] = "teacher";
  j["config"] = config_echo;
  j["frozen"] = teacher.frozen;
  j["weight_hash"] = teacher.model.weight_hash();
  j["model"] = detector_to_json(teacher.model);
  j["metrics"] = metrics ? metrics_to_json(*metrics) : Json(nullptr);
  write_text_file(path, j.dump());
}

ToyTeacher load_teacher(const std::filesystem::path& path) {
  const Json j = read_json(path);
  if (j.value("kind", "") != "teacher") throw std::runtime_error("checkpoint " + path.string() + " is not a teacher");
  ToyTeacher t{detector_from_json(j.at("model")), true};
  if (j.contains("weight_hash") && j.at("weight_hash").get<std::string>() != t.model.weight_hash()) {
    throw std::runtime_error("teacher checkpoint " + path.string() + " fails its weight hash");
  }
  return t;
}

}  // namespace bevkd
