#include "bevkd/scene.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bevkd/instance_distill.hpp"
#include "bevkd/rng.hpp"

namespace bevkd {
namespace {

using Json = nlohmann::ordered_json;

struct ClassProfile {
  double w_lo, w_hi, l_lo, l_hi, h_lo, h_hi;
  double max_speed;
  double frequency;
  double reflectance;
};

// car, truck, pedestrian, cyclist
constexpr std::array<ClassProfile, 4> kProfiles{{
    {1.7, 2.1, 3.9, 4.8, 1.4, 1.7, 8.0, 0.45, 1.0},
    {2.4, 3.0, 6.5, 9.0, 2.8, 3.6, 5.0, 0.15, 0.75},
    {0.5, 0.8, 0.5, 0.8, 1.6, 1.9, 1.5, 0.25, 0.55},
    {0.6, 0.8, 1.6, 1.9, 1.3, 1.7, 4.0, 0.15, 0.85},
}};

constexpr int kSupersample = 4;
constexpr double kRearShade = 0.7;
constexpr double kPlacementMargin = 3.0;

int sample_class(Rng& rng, int num_classes) {
  double total = 0.0;
  for (int k = 0; k < num_classes; ++k) total += kProfiles[static_cast<std::size_t>(k)].frequency;
  double u = rng.uniform() * total;
  for (int k = 0; k < num_classes; ++k) {
    u -= kProfiles[static_cast<std::size_t>(k)].frequency;
    if (u < 0.0) return k;
  }
  return num_classes - 1;
}

BevBox sample_box(Rng& rng, const BevGrid& grid, int num_classes) {
  const int k = sample_class(rng, num_classes);
  const ClassProfile& p = kProfiles[static_cast<std::size_t>(k)];
  const double x = rng.uniform(grid.x_min() + kPlacementMargin, grid.x_max() - kPlacementMargin);
  const double y = rng.uniform(grid.y_min() + kPlacementMargin, grid.y_max() - kPlacementMargin);
  const double w = rng.uniform(p.w_lo, p.w_hi);
  const double l = rng.uniform(p.l_lo, p.l_hi);
  const double h = rng.uniform(p.h_lo, p.h_hi);
  const double yaw = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double speed = rng.uniform() < 0.3 ? 0.0 : rng.uniform(0.0, p.max_speed);
  return BevBox::make(x, y, h / 2.0, w, l, h, yaw, speed * std::cos(yaw), speed * std::sin(yaw), k);
}

BevBox inflated(const BevBox& b, double pad) {
  BevBox out = b;
  out.w += pad;
  out.l += pad;
  return out;
}

BevBox shifted_back(const BevBox& b, double dt) {
  BevBox out = b;
  out.x -= b.vx * dt;
  out.y -= b.vy * dt;
  return out;
}

// Adds each box's shaded footprint coverage times `gain(box)` into channel
// `channel` of `out`.
template <typename Gain>
void splat(Tensor& out, std::size_t channel, std::span<const BevBox> boxes, const BevGrid& grid, Gain gain) {
  const std::size_t H = grid.height_cells(), W = grid.width_cells(), C = out.dim(2);
  const double sub = 1.0 / kSupersample;
  for (const BevBox& b : boxes) {
    const double c = std::cos(b.yaw), s = std::sin(b.yaw);
    const double reach = 0.5 * std::hypot(b.w, b.l);
    const CellCoord lo = grid.world_to_cell(b.x - reach, b.y - reach);
    const CellCoord hi = grid.world_to_cell(b.x + reach, b.y + reach);
    const long r0 = std::max(0L, static_cast<long>(std::floor(lo.row)));
    const long r1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(hi.row)));
    const long c0 = std::max(0L, static_cast<long>(std::floor(lo.col)));
    const long c1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(hi.col)));
    const double g = gain(b);
    for (long r = r0; r <= r1; ++r) {
      for (long col = c0; col <= c1; ++col) {
        double acc = 0.0;
        for (int i = 0; i < kSupersample; ++i) {
          for (int j = 0; j < kSupersample; ++j) {
            const WorldPoint p = grid.cell_to_world(static_cast<double>(r) - 0.5 + (i + 0.5) * sub,
                                                    static_cast<double>(col) - 0.5 + (j + 0.5) * sub);
            const double dx = p.x - b.x, dy = p.y - b.y;
            const double u = dx * c + dy * s;
            const double v = -dx * s + dy * c;
            if (std::fabs(u) <= b.l / 2 && std::fabs(v) <= b.w / 2) acc += u >= 0.0 ? 1.0 : kRearShade;
          }
        }
        if (acc > 0.0) {
          out.data[(static_cast<std::size_t>(r) * W + static_cast<std::size_t>(col)) * C + channel] +=
              g * acc / (kSupersample * kSupersample);
        }
      }
    }
  }
}

std::vector<BevBox> previous_frame(std::span<const BevBox> boxes, double dt) {
  std::vector<BevBox> prev;
  prev.reserve(boxes.size());
  for (const auto& b : boxes) prev.push_back(shifted_back(b, dt));
  return prev;
}

double range_of(const WorldPoint& p) { return std::hypot(p.x, p.y); }

// Zero outside the grid.
double sample_plane(const Tensor& t, std::size_t channel, const BevGrid& grid, double x, double y) {
  const CellCoord cc = grid.world_to_cell(x, y);
  const long H = static_cast<long>(grid.height_cells()), W = static_cast<long>(grid.width_cells());
  const long r0 = static_cast<long>(std::floor(cc.row)), c0 = static_cast<long>(std::floor(cc.col));
  const double fr = cc.row - static_cast<double>(r0), fc = cc.col - static_cast<double>(c0);
  auto at = [&](long r, long c) {
    if (r < 0 || r >= H || c < 0 || c >= W) return 0.0;
    return t.data[(static_cast<std::size_t>(r) * static_cast<std::size_t>(W) + static_cast<std::size_t>(c)) * t.dim(2) +
                  channel];
  };
  return (1 - fr) * ((1 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) + fr * ((1 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
}

// Gaussian blur along the line of sight, 9 taps over +-2 sigma.
Tensor radial_blur(const Tensor& clean, const BevGrid& grid, double depth_blur) {
  if (depth_blur == 0.0) return clean;
  constexpr int kTaps = 9;
  std::array<double, kTaps> weights{};
  double total = 0.0;
  for (int k = 0; k < kTaps; ++k) total += weights[static_cast<std::size_t>(k)] = std::exp(-0.5 * ((k - 4) / 2.0) * ((k - 4) / 2.0));
  for (auto& w : weights) w /= total;
  const double half_extent = 0.5 * grid.extent();
  const double cell = std::min(grid.cell_size_x(), grid.cell_size_y());
  Tensor out(clean.shape);
  const std::size_t H = grid.height_cells(), W = grid.width_cells(), C = clean.dim(2);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const WorldPoint p = grid.cell_to_world(static_cast<double>(r), static_cast<double>(c));
      const double rho = range_of(p);
      const double sigma = depth_blur * cell * rho / half_extent;
      const double ux = rho > 0.0 ? p.x / rho : 0.0, uy = rho > 0.0 ? p.y / rho : 0.0;
      for (std::size_t ch = 0; ch < C; ++ch) {
        double acc = 0.0;
        for (int k = 0; k < kTaps; ++k) {
          const double t = sigma * (k - 4) / 2.0;
          acc += weights[static_cast<std::size_t>(k)] * sample_plane(clean, ch, grid, p.x + t * ux, p.y + t * uy);
        }
        out.data[(r * W + c) * C + ch] = acc;
      }
    }
  }
  return out;
}

Tensor render_lidar(std::span<const BevBox> boxes, const BevGrid& grid, const GenerationSpec& spec, Rng& rng) {
  const std::size_t H = grid.height_cells(), W = grid.width_cells();
  Tensor out({H, W, kInputChannels});
  auto height_gain = [](const BevBox& b) { return 0.35 * b.h; };
  splat(out, 0, boxes, grid, height_gain);
  const auto prev = previous_frame(boxes, spec.dt);
  splat(out, 1, prev, grid, height_gain);
  const double half_extent = 0.5 * grid.extent();
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double rho = range_of(grid.cell_to_world(static_cast<double>(r), static_cast<double>(c)));
      const double atten = 1.0 / (1.0 + rho / (2.0 * half_extent));
      const double drop = std::min(1.0, spec.lidar_dropout * (rho / half_extent) * (rho / half_extent));
      for (std::size_t ch = 0; ch < kInputChannels; ++ch) {
        double& v = out.data[(r * W + c) * kInputChannels + ch];
        const bool dropped = rng.uniform() < drop;
        v = dropped ? 0.0 : v * atten;
        if (rng.uniform() < spec.lidar_noise_rate) v += rng.uniform(0.1, 0.5);
      }
    }
  }
  return out;
}

// Smooth static background: three random plane waves mapped into [0, 1].
std::vector<double> background_texture(const BevGrid& grid, Rng& rng) {
  struct Wave {
    double kx, ky, phase;
  };
  std::array<Wave, 3> waves{};
  for (auto& w : waves) {
    const double freq = 2.0 * std::numbers::pi * rng.uniform(0.05, 0.2);
    const double dir = rng.uniform(-std::numbers::pi, std::numbers::pi);
    w = {freq * std::cos(dir), freq * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi)};
  }
  std::vector<double> tex(grid.num_cells());
  for (std::size_t r = 0; r < grid.height_cells(); ++r) {
    for (std::size_t c = 0; c < grid.width_cells(); ++c) {
      const WorldPoint p = grid.cell_to_world(static_cast<double>(r), static_cast<double>(c));
      double s = 0.0;
      for (const auto& w : waves) s += std::sin(w.kx * p.x + w.ky * p.y + w.phase);
      tex[grid.index(r, c)] = 0.5 + s / 6.0;
    }
  }
  return tex;
}

Tensor render_camera(std::span<const BevBox> boxes, const BevGrid& grid, const GenerationSpec& spec, Rng& rng) {
  Tensor out = radial_blur(render_camera_clean(boxes, grid, spec.dt), grid, spec.depth_blur);
  const bool textured = spec.background_level != 0.0;
  const bool noisy = spec.noise_std != 0.0;
  if (!textured && !noisy) return out;
  const auto tex = background_texture(grid, rng);
  for (std::size_t cell = 0; cell < grid.num_cells(); ++cell) {
    for (std::size_t ch = 0; ch < kInputChannels; ++ch) {
      double& v = out.data[cell * kInputChannels + ch];
      if (textured) v += spec.background_level * tex[cell];
      if (noisy) v += rng.normal(0.0, spec.noise_std);
    }
  }
  return out;
}

Json box_json(const BevBox& b) {
  const auto a = b.to_array();
  return Json(std::vector<double>(a.begin(), a.end()));
}

Json grid_json(const BevGrid& g) {
  return Json::array({static_cast<double>(g.height_cells()), static_cast<double>(g.width_cells()), g.x_min(), g.x_max(),
                      g.y_min(), g.y_max()});
}

BevGrid grid_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 6) throw std::runtime_error("dataset: grid must be 6 numbers");
  return BevGrid(j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<double>(), j[3].get<double>(),
                 j[4].get<double>(), j[5].get<double>());
}

Json spec_json(const GenerationSpec& s) {
  Json j;
  j["min_boxes"] = s.min_boxes;
  j["max_boxes"] = s.max_boxes;
  j["num_classes"] = s.num_classes;
  j["dt"] = s.dt;
  j["noise_std"] = s.noise_std;
  j["depth_blur"] = s.depth_blur;
  j["background_level"] = s.background_level;
  j["lidar_dropout"] = s.lidar_dropout;
  j["lidar_noise_rate"] = s.lidar_noise_rate;
  return j;
}

GenerationSpec spec_from_json(const Json& j) {
  GenerationSpec s;
  s.min_boxes = j.at("min_boxes").get<int>();
  s.max_boxes = j.at("max_boxes").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.dt = j.at("dt").get<double>();
  s.noise_std = j.at("noise_std").get<double>();
  s.depth_blur = j.at("depth_blur").get<double>();
  s.background_level = j.at("background_level").get<double>();
  s.lidar_dropout = j.at("lidar_dropout").get<double>();
  s.lidar_noise_rate = j.at("lidar_noise_rate").get<double>();
  s.validate();
  return s;
}

Json raster_json(const Tensor& t) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < t.dim(0); ++r) {
    Json row = Json::array();
    for (std::size_t c = 0; c < t.dim(1); ++c) {
      const auto* v = &t.data[(r * t.dim(1) + c) * t.dim(2)];
      row.push_back(std::vector<double>(v, v + t.dim(2)));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor raster_from_json(const Json& j, const BevGrid& grid) {
  Tensor t({grid.height_cells(), grid.width_cells(), kInputChannels});
  if (j.size() != grid.height_cells()) throw std::runtime_error("dataset: raster row count mismatch");
  std::size_t i = 0;
  for (const auto& row : j) {
    if (row.size() != grid.width_cells()) throw std::runtime_error("dataset: raster column count mismatch");
    for (const auto& cell : row) {
      if (cell.size() != kInputChannels) throw std::runtime_error("dataset: raster channel count mismatch");
      for (const auto& v : cell) t.data[i++] = v.get<double>();
    }
  }
  return t;
}

constexpr const char* kDatasetFormat = "bevkd-scenes";
constexpr int kDatasetVersion = 1;

}  // namespace

void GenerationSpec::validate() const {
  if (min_boxes < 1) throw std::invalid_argument("GenerationSpec: min_boxes must be at least 1");
  if (min_boxes > max_boxes) throw std::invalid_argument("GenerationSpec: min_boxes exceeds max_boxes");
  if (max_boxes > 64) throw std::invalid_argument("GenerationSpec: max_boxes above 64");
  if (num_classes < 1 || num_classes > static_cast<int>(kProfiles.size())) {
    throw std::invalid_argument("GenerationSpec: num_classes must be in [1, 4]");
  }
  if (!(dt >= 0.0)) throw std::invalid_argument("GenerationSpec: dt must be non-negative");
  if (!(noise_std >= 0.0) || !(depth_blur >= 0.0) || !(background_level >= 0.0)) {
    throw std::invalid_argument("GenerationSpec: camera parameters must be non-negative");
  }
  if (!(lidar_dropout >= 0.0 && lidar_dropout <= 1.0) || !(lidar_noise_rate >= 0.0 && lidar_noise_rate <= 1.0)) {
    throw std::invalid_argument("GenerationSpec: lidar rates must be in [0, 1]");
  }
}

BevGrid default_grid() { return BevGrid(64, 64, -32.0, 32.0, -32.0, 32.0); }

std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index) { return mix_seed(dataset_seed, index); }

Tensor render_camera_clean(std::span<const BevBox> boxes, const BevGrid& grid, double dt) {
  Tensor out({grid.height_cells(), grid.width_cells(), kInputChannels});
  auto shade = [](const BevBox& b) { return kProfiles.at(static_cast<std::size_t>(b.class_id)).reflectance; };
  splat(out, 0, boxes, grid, shade);
  const auto prev = previous_frame(boxes, dt);
  splat(out, 1, prev, grid, shade);
  const double half_extent = 0.5 * grid.extent();
  for (std::size_t cell = 0; cell < grid.num_cells(); ++cell) {
    const double rho = range_of(grid.cell_to_world(static_cast<double>(cell / grid.width_cells()),
                                                   static_cast<double>(cell % grid.width_cells())));
    const double atten = 1.0 / (1.0 + rho / (1.5 * half_extent));
    for (std::size_t ch = 0; ch < kInputChannels; ++ch) out.data[cell * kInputChannels + ch] *= atten;
  }
  return out;
}

Scene generate_scene(std::uint64_t seed, const BevGrid& grid, const GenerationSpec& spec, std::string scene_id) {
  spec.validate();
  if (grid.x_max() - grid.x_min() <= 2 * kPlacementMargin || grid.y_max() - grid.y_min() <= 2 * kPlacementMargin) {
    throw std::invalid_argument("generate_scene: grid too small for box placement");
  }
  Rng rng(seed);
  Scene scene;
  scene.scene_id = std::move(scene_id);
  scene.rng_seed = seed;
  scene.grid = grid;
  const auto target = static_cast<std::size_t>(rng.range(spec.min_boxes, spec.max_boxes));
  std::size_t attempts = 0;
  while (scene.gt_boxes.size() < target) {
    if (++attempts > 1000 * target) throw std::runtime_error("generate_scene: could not place boxes without overlap");
    const BevBox b = sample_box(rng, grid, spec.num_classes);
    const bool clear = std::none_of(scene.gt_boxes.begin(), scene.gt_boxes.end(), [&](const BevBox& o) {
      return rotated_bev_iou(inflated(o, 1.0), inflated(b, 1.0)) > 0.0;
    });
    if (clear) scene.gt_boxes.push_back(b);
  }
  scene.lidar_like = render_lidar(scene.gt_boxes, grid, spec, rng);
  scene.camera_like = render_camera(scene.gt_boxes, grid, spec, rng);
  return scene;
}

Dataset generate_dataset(std::uint64_t seed, std::size_t count, const BevGrid& grid, const GenerationSpec& spec) {
  spec.validate();
  Dataset d{seed, grid, spec, {}};
  d.scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene-%05zu", i);
    d.scenes.push_back(generate_scene(scene_seed(seed, i), grid, spec, id));
  }
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset, bool inline_arrays) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset file " + path.string());
  Json header;
  header["format"] = kDatasetFormat;
  header["version"] = kDatasetVersion;
  header["seed"] = dataset.seed;
  header["count"] = dataset.scenes.size();
  header["grid"] = grid_json(dataset.grid);
  header["generation"] = spec_json(dataset.spec);
  out << header.dump() << '\n';
  for (const Scene& s : dataset.scenes) {
    Json rec;
    rec["scene_id"] = s.scene_id;
    rec["rng_seed"] = s.rng_seed;
    rec["grid"] = grid_json(s.grid);
    Json boxes = Json::array();
    for (const auto& b : s.gt_boxes) boxes.push_back(box_json(b));
    rec["gt_boxes"] = std::move(boxes);
    if (inline_arrays) {
      rec["lidar_like"] = raster_json(s.lidar_like);
      rec["camera_like"] = raster_json(s.camera_like);
    } else {
      rec["regenerate"] = true;
    }
    out << rec.dump() << '\n';
  }
  if (!out) throw std::runtime_error("failed writing dataset file " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("dataset file " + path.string() + " has no header");
  const Json header = Json::parse(line);
  if (header.value("format", "") != kDatasetFormat || header.value("version", 0) != kDatasetVersion) {
    throw std::runtime_error("dataset file " + path.string() + " has an unsupported header");
  }
  Dataset d;
  d.seed = header.at("seed").get<std::uint64_t>();
  d.grid = grid_from_json(header.at("grid"));
  d.spec = spec_from_json(header.at("generation"));
  const auto count = header.at("count").get<std::size_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json rec = Json::parse(line);
    const auto id = rec.at("scene_id").get<std::string>();
    const auto seed = rec.at("rng_seed").get<std::uint64_t>();
    const BevGrid grid = grid_from_json(rec.at("grid"));
    std::vector<BevBox> boxes;
    for (const auto& b : rec.at("gt_boxes")) boxes.push_back(BevBox::from_array(b.get<std::vector<double>>()));
    Scene s;
    if (rec.value("regenerate", false)) {
      s = generate_scene(seed, grid, d.spec, id);
      if (s.gt_boxes != boxes) throw std::runtime_error("dataset: scene " + id + " does not regenerate from its seed");
    } else {
      s.scene_id = id;
      s.rng_seed = seed;
      s.grid = grid;
      s.gt_boxes = std::move(boxes);
      s.lidar_like = raster_from_json(rec.at("lidar_like"), grid);
      s.camera_like = raster_from_json(rec.at("camera_like"), grid);
    }
    d.scenes.push_back(std::move(s));
  }
  if (d.scenes.size() != count) throw std::runtime_error("dataset: header count does not match records");
  return d;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

}  // namespace bevkd
