#include "bevkd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "bevkd/contrastive_critic.hpp"
#include "bevkd/rng.hpp"
#include "bevkd/scene.hpp"

namespace bevkd {
namespace {

// Typical box at initialization: z, log w, log l, log h, sin, cos.
constexpr double kInitZ = 0.8;
constexpr double kInitW = 1.9;
constexpr double kInitL = 4.3;
constexpr double kInitH = 1.55;
// Objectness prior of 0.01.
constexpr double kObjectnessPrior = -4.6;

Tensor he_normal(Rng& rng, Shape shape, std::size_t fan_in, double gain = 2.0) {
  Tensor t(std::move(shape));
  const double sd = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : t.data) v = rng.normal(0.0, sd);
  return t;
}

std::string stage_key(std::size_t s, const char* name) { return "dec" + std::to_string(s) + "." + name; }

std::size_t stage_input_dim(const DetectorConfig& c, std::size_t s) {
  return 9 * c.feature_channels + 2 + (s > 0 ? c.embed_dim : 0);
}

const Var& get(const BoundWeights& w, const std::string& key) {
  auto it = w.find(key);
  if (it == w.end()) throw std::invalid_argument("detector: missing weight " + key);
  return it->second;
}

Var linear(const BoundWeights& w, const std::string& prefix, const Var& x) {
  return ad::add_row_bias(ad::matmul(x, get(w, prefix + ".w")), get(w, prefix + ".b"));
}

// [Q, 9 C] features sampled on a 3x3 pattern around each reference point.
Var sample_pattern(const FeatureMap& f, const std::vector<WorldPoint>& refs) {
  std::vector<WorldPoint> pts;
  pts.reserve(refs.size() * 9);
  const double sx = kDecoderSampleOffset * f.grid.cell_size_x(), sy = kDecoderSampleOffset * f.grid.cell_size_y();
  for (const auto& r : refs)
    for (int i = -1; i <= 1; ++i)
      for (int j = -1; j <= 1; ++j) pts.push_back({r.x + j * sx, r.y + i * sy});
  return ad::reshape(bilinear_sample(f, pts), {refs.size(), 9 * f.channels});
}

WorldPoint clamp_to_grid(const BevGrid& g, double x, double y) {
  return {std::clamp(x, g.x_min(), g.x_max()), std::clamp(y, g.y_min(), g.y_max())};
}

}  // namespace

void DetectorConfig::validate() const {
  if (input_channels == 0 || hidden_channels == 0 || feature_channels == 0 || embed_dim == 0) {
    throw std::invalid_argument("DetectorConfig: widths must be positive");
  }
  if (num_queries < 2) throw std::invalid_argument("DetectorConfig: at least two queries");
  if (num_stages == 0) throw std::invalid_argument("DetectorConfig: at least one stage");
  if (num_classes < 1) throw std::invalid_argument("DetectorConfig: at least one class");
}

ToyDetector ToyDetector::init(const DetectorConfig& c, Rng& rng) {
  c.validate();
  ToyDetector d;
  d.config = c;
  auto& w = d.weights;
  const std::size_t hid = c.hidden_channels, F = c.feature_channels, E = c.embed_dim;
  const auto K1 = static_cast<std::size_t>(c.num_classes) + 1;
  w["enc.conv1.w"] = he_normal(rng, {3, 3, c.input_channels, hid}, 9 * c.input_channels);
  w["enc.conv1.b"] = Tensor({hid});
  w["enc.conv2.w"] = he_normal(rng, {3, 3, hid, hid}, 9 * hid);
  w["enc.conv2.b"] = Tensor({hid});
  w["enc.conv3.w"] = he_normal(rng, {1, 1, hid, F}, hid, 1.0);
  w["enc.conv3.b"] = Tensor({F});
  w["obj.w"] = he_normal(rng, {1, 1, F, 1}, F, 0.1);
  w["obj.b"] = Tensor({1}, kObjectnessPrior);
  for (std::size_t s = 0; s < c.num_stages; ++s) {
    const std::size_t in = stage_input_dim(c, s);
    w[stage_key(s, "fc1.w")] = he_normal(rng, {in, E}, in);
    w[stage_key(s, "fc1.b")] = Tensor({E});
    w[stage_key(s, "fc2.w")] = he_normal(rng, {E, E}, E);
    w[stage_key(s, "fc2.b")] = Tensor({E});
    w[stage_key(s, "cls.w")] = he_normal(rng, {E, K1}, E, 0.01);
    w[stage_key(s, "cls.b")] = Tensor({K1});
    w[stage_key(s, "box.w")] = he_normal(rng, {E, kBoxParams}, E, 0.01);
    w[stage_key(s, "box.b")] = Tensor(
        {kBoxParams}, {0.0, 0.0, kInitZ, std::log(kInitW), std::log(kInitL), std::log(kInitH), 0.0, 1.0, 0.0, 0.0});
  }
  return d;
}

std::string ToyDetector::weight_hash() const {
  std::string bytes;
  for (const auto& [name, t] : weights) {
    bytes += name;
    bytes += shape_str(t.shape);
    const auto* p = reinterpret_cast<const char*>(t.data.data());
    bytes.append(p, t.data.size() * sizeof(double));
  }
  return sha256_hex(bytes);
}

std::size_t ToyDetector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : weights) n += t.numel();
  return n;
}

BoundWeights bind_weights(Tape& tape, const WeightMap& weights, bool trainable) {
  BoundWeights out;
  for (const auto& [name, t] : weights) out.emplace(name, trainable ? tape.leaf(t) : tape.constant(t));
  return out;
}

std::vector<WorldPoint> select_queries(const Tensor& logits, const BevGrid& grid, std::size_t k) {
  const std::size_t H = grid.height_cells(), W = grid.width_cells();
  if (logits.numel() != H * W) throw std::invalid_argument("select_queries: map size does not match grid");
  if (k > H * W) throw std::invalid_argument("select_queries: more queries than cells");
  const auto& v = logits.data;
  std::vector<std::size_t> peaks, rest;
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const std::size_t i = r * W + c;
      bool peak = true;
      for (long dr = -1; dr <= 1 && peak; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
          if ((dr == 0 && dc == 0) || rr < 0 || cc < 0 || rr >= static_cast<long>(H) || cc >= static_cast<long>(W)) continue;
          const std::size_t j = static_cast<std::size_t>(rr) * W + static_cast<std::size_t>(cc);
          // A neighbour wins if larger, or equal and earlier in raster order.
          if (v[j] > v[i] || (v[j] == v[i] && j < i)) {
            peak = false;
            break;
          }
        }
      }
      (peak ? peaks : rest).push_back(i);
    }
  }
  auto stronger = [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
  std::sort(peaks.begin(), peaks.end(), stronger);
  if (peaks.size() < k) {
    std::sort(rest.begin(), rest.end(), stronger);
    peaks.insert(peaks.end(), rest.begin(), rest.begin() + static_cast<long>(k - peaks.size()));
  }
  peaks.resize(k);
  std::vector<WorldPoint> out;
  out.reserve(k);
  for (std::size_t i : peaks) out.push_back(grid.cell_to_world(static_cast<double>(i / W), static_cast<double>(i % W)));
  return out;
}

DetectorOutput forward(const DetectorConfig& c, const BoundWeights& w, const Tensor& input, const BevGrid& grid) {
  if (input.shape != Shape{grid.height_cells(), grid.width_cells(), c.input_channels}) {
    throw std::invalid_argument("forward: input shape " + shape_str(input.shape) + " does not match grid and config");
  }
  Tape& tape = get(w, "enc.conv1.w").tape();
  Var x = tape.constant(input);
  Var h = ad::relu(ad::conv2d(x, get(w, "enc.conv1.w"), get(w, "enc.conv1.b"), 1));
  h = ad::relu(ad::conv2d(h, get(w, "enc.conv2.w"), get(w, "enc.conv2.b"), 2));
  Var f = ad::conv2d(h, get(w, "enc.conv3.w"), get(w, "enc.conv3.b"), 1);
  DetectorOutput out{FeatureMap(grid, f), ad::conv2d(f, get(w, "obj.w"), get(w, "obj.b"), 1), {}};

  std::vector<WorldPoint> refs = select_queries(out.objectness.value(), grid, c.num_queries);
  const std::size_t Q = c.num_queries;
  const double half_x = 0.5 * (grid.x_max() - grid.x_min()), half_y = 0.5 * (grid.y_max() - grid.y_min());
  const double mid_x = 0.5 * (grid.x_max() + grid.x_min()), mid_y = 0.5 * (grid.y_max() + grid.y_min());
  Var prev_embed;
  for (std::size_t s = 0; s < c.num_stages; ++s) {
    Tensor pos({Q, 2}), ref_xy({Q, 2});
    for (std::size_t q = 0; q < Q; ++q) {
      pos.data[2 * q] = (refs[q].x - mid_x) / half_x;
      pos.data[2 * q + 1] = (refs[q].y - mid_y) / half_y;
      ref_xy.data[2 * q] = refs[q].x;
      ref_xy.data[2 * q + 1] = refs[q].y;
    }
    Var in = ad::concat_cols(sample_pattern(out.features, refs), tape.constant(pos));
    if (s > 0) in = ad::concat_cols(in, prev_embed);
    Var e = ad::relu(linear(w, stage_key(s, "fc1"), in));
    e = ad::relu(linear(w, stage_key(s, "fc2"), e));
    Var probs = ad::softmax_rows(linear(w, stage_key(s, "cls"), e));
    Var raw = linear(w, stage_key(s, "box"), e);
    Var center = ad::add_const(ad::slice_cols(raw, 0, 2), ref_xy);
    Var boxes = ad::concat_cols(ad::concat_cols(ad::concat_cols(center, ad::slice_cols(raw, 2, 3)),
                                                ad::exp(ad::slice_cols(raw, 3, 6))),
                                ad::slice_cols(raw, 6, kBoxParams));
    out.stages.push_back(StagePredictions{probs, boxes, e, refs, static_cast<int>(s)});
    prev_embed = e;
    // Next stage starts from this stage's centers, without gradient.
    const auto& bv = boxes.value().data;
    for (std::size_t q = 0; q < Q; ++q) refs[q] = clamp_to_grid(grid, bv[q * kBoxParams], bv[q * kBoxParams + 1]);
  }
  return out;
}

}  // namespace bevkd
