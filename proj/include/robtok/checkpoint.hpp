#pragma once

#include "robtok/vit.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace robtok {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VersionMismatchError : public CheckpointError {
 public:
  VersionMismatchError(std::uint32_t found, std::uint32_t expected);
  std::uint32_t found;
  std::uint32_t expected;
};

class TruncatedFileError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ExtentOverflowError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// The file could not be opened, read or written at all.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ViTConfig config;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;  // filled in by save/load
  std::vector<std::pair<std::string, Tensor>> tensors;

  /// nullptr when absent.
  const Tensor* find(const std::string& name) const;
};

/// 64-bit FNV-1a over the serialized config record.
std::uint64_t config_hash(const ViTConfig& config);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

inline const std::string kRobTokensName = "rob.tokens";
inline const std::string kProbeWeightName = "probe.weight";
inline const std::string kProbeBiasName = "probe.bias";

Checkpoint model_checkpoint(const ModelWeights& model, std::uint64_t seed);
ModelWeights model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace robtok
