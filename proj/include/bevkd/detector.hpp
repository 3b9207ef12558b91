#pragma once

// Small query-based BEV detector used for both the teacher and the student.

#include <map>
#include <string>
#include <vector>

#include "bevkd/instance_distill.hpp"
#include "bevkd/types.hpp"

namespace bevkd {

class Rng;

struct DetectorConfig {
  std::size_t input_channels = 2;
  std::size_t hidden_channels = 12;
  std::size_t feature_channels = 16;
  std::size_t num_queries = 16;
  std::size_t num_stages = 2;
  std::size_t embed_dim = 32;
  int num_classes = kDefaultNumClasses;

  void validate() const;
  bool operator==(const DetectorConfig&) const = default;
};

using WeightMap = std::map<std::string, Tensor>;
using BoundWeights = std::map<std::string, Var>;

struct ToyDetector {
  DetectorConfig config;
  WeightMap weights;

  static ToyDetector init(const DetectorConfig& config, Rng& rng);
  /// SHA-256 over names, shapes and raw weight bytes.
  std::string weight_hash() const;
  std::size_t parameter_count() const;
};

/// Frozen detector trained on lidar_like inputs.
struct ToyTeacher {
  ToyDetector model;
  bool frozen = true;
};

BoundWeights bind_weights(Tape& tape, const WeightMap& weights, bool trainable);

struct DetectorOutput {
  FeatureMap features;   // [H, W, feature_channels]
  Var objectness;        // [H, W, 1] logits
  std::vector<StagePredictions> stages;
};

/// Full forward pass on an [H, W, input_channels] raster.
DetectorOutput forward(const DetectorConfig& config, const BoundWeights& weights, const Tensor& input,
                       const BevGrid& grid);

/// Cell centers of the `k` strongest 3x3 local maxima of a single-channel
/// map, ties broken by raster order; padded with the strongest remaining
/// cells when there are fewer maxima than `k`.
std::vector<WorldPoint> select_queries(const Tensor& logits, const BevGrid& grid, std::size_t k);

/// Sampling offsets around a reference point, in cells.
inline constexpr double kDecoderSampleOffset = 2.0;

}  // namespace bevkd
