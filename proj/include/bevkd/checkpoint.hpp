#pragma once

// Versioned JSON checkpoints for trained students and frozen teachers.

#include <filesystem>
#include <optional>

#include <json.hpp>

#include "bevkd/eval_metrics.hpp"
#include "bevkd/training.hpp"

namespace bevkd {

inline constexpr int kCheckpointFormatVersion = 1;

using Json = nlohmann::ordered_json;

Json detector_to_json(const ToyDetector& model);
ToyDetector detector_from_json(const Json& j);

Json metrics_to_json(const MetricReport& m);
Json loss_report_to_json(const LossReport& r);

/// Student weights, critic, optimizer, rng, data cursor and loss history.
Json train_state_to_json(const TrainState& state, const Json& config_echo);
TrainState train_state_from_json(const Json& j);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const Json& config_echo);
TrainState load_checkpoint(const std::filesystem::path& path);

void save_teacher(const std::filesystem::path& path, const ToyTeacher& teacher, const Json& config_echo,
                  const std::optional<MetricReport>& metrics);
ToyTeacher load_teacher(const std::filesystem::path& path);

/// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace bevkd
