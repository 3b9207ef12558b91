#pragma once

// Synthetic paired-modality BEV scenes and their line-delimited dataset files.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bevkd/types.hpp"

namespace bevkd {

struct GenerationSpec {
  int min_boxes = 1;
  int max_boxes = 12;
  int num_classes = kDefaultNumClasses;
  double dt = 0.5;
  // camera_like
  double noise_std = 0.07;
  double depth_blur = 2.0;
  double background_level = 0.15;
  // lidar_like
  double lidar_dropout = 0.1;
  double lidar_noise_rate = 0.002;

  void validate() const;
  bool operator==(const GenerationSpec&) const = default;
};

/// 64 x 64 cells over [-32, 32] m on both axes.
BevGrid default_grid();

/// Channels of both inputs: 0 = current frame, 1 = previous frame.
inline constexpr std::size_t kInputChannels = 2;

struct Scene {
  std::string scene_id;
  std::vector<BevBox> gt_boxes;
  Tensor lidar_like;   // [H, W, 2]
  Tensor camera_like;  // [H, W, 2]
  std::uint64_t rng_seed = 0;
  BevGrid grid = default_grid();

  bool operator==(const Scene&) const = default;
};

Scene generate_scene(std::uint64_t seed, const BevGrid& grid, const GenerationSpec& spec,
                     std::string scene_id = {});

/// Noise-free, unblurred camera rendering of the boxes (both frames).
Tensor render_camera_clean(std::span<const BevBox> boxes, const BevGrid& grid, double dt);

/// Seed of scene `index` in a dataset generated from `dataset_seed`.
std::uint64_t scene_seed(std::uint64_t dataset_seed, std::size_t index);

struct Dataset {
  std::uint64_t seed = 0;
  BevGrid grid = default_grid();
  GenerationSpec spec;
  std::vector<Scene> scenes;
};

Dataset generate_dataset(std::uint64_t seed, std::size_t count, const BevGrid& grid, const GenerationSpec& spec);

/// Writes a header line plus one line per scene. Without `inline_arrays`
/// records carry a regenerate flag instead of the input rasters.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset, bool inline_arrays = false);

/// Reads a dataset file; regenerated scenes are checked against their
/// recorded boxes.
Dataset read_dataset(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);
std::string file_digest(const std::filesystem::path& path);

}  // namespace bevkd
