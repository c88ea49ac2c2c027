#pragma once

#include "robtok/attacks.hpp"
#include "robtok/dataset.hpp"
#include "robtok/pretrain.hpp"
#include "robtok/probe.hpp"
#include "robtok/training.hpp"
#include "robtok/vit.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace robtok {

/// Everything a command needs. One master seed drives the dataset,
/// pretraining, token training and attacks; resolve() copies it into the
/// per-module configs.
struct RunConfig {
  std::uint64_t seed = 7;
  int threads = 1;
  SyntheticDatasetSpec data;
  ViTConfig vit;
  PretrainConfig pretrain;
  TrainConfig train;
  AttackConfig attack;
  ProbeConfig probe;
  Index num_tokens = 10;
  std::vector<Index> counts{1, 10, 20, 50};
  Index eval_samples = 0;  // 0 uses the whole evaluation split

  /// Copies the master seed and shared sizes into the sub-configs and validates.
  void resolve();
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Missing keys keep their defaults; unknown keys throw ConfigError.
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace robtok
