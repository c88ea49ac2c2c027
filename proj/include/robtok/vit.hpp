#pragma once

#include "robtok/ops.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace robtok {

struct ViTConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int dim = 32;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;
  int num_registers = 0;
  int num_classes = 8;
  double ln_eps = 1e-6;
  // Pixels enter the patch embedding as (x - pixel_mean) / pixel_std.
  double pixel_mean = 0.5;
  double pixel_std = 0.2;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int head_dim() const { return dim / heads; }
  /// Throws ContractError when the architecture is inconsistent.
  void validate() const;

  bool operator==(const ViTConfig&) const = default;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return matmul(x, weight) + bias; }
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct BlockWeights {
  LayerNormParams norm1;
  Linear qkv;
  Linear proj;
  LayerNormParams norm2;
  Linear fc1;
  Linear fc2;
};

/// The frozen backbone f. Tensors are created without gradients; pretraining
/// flips them on with set_trainable(true).
struct ModelWeights {
  ViTConfig config;
  Linear patch_embed;
  Tensor pos_embed;  // [1 + P, D]: class slot then patches
  Tensor cls_token;  // [1, D]
  Tensor registers;  // [num_registers, D]
  std::vector<BlockWeights> blocks;
  LayerNormParams norm;
  std::optional<Linear> head;  // [D, K]; present only while pretraining

  static ModelWeights init(const ViTConfig& config, std::uint64_t seed, bool with_head = true);
  static ModelWeights from_named(const ViTConfig& config, const std::vector<std::pair<std::string, Tensor>>& named);

  /// Stable names for checkpoints ("blocks.0.attn.qkv.weight", ...).
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  void set_trainable(bool trainable) const;
  /// Deep copy so callers can compare weights before and after a run.
  ModelWeights clone() const;
  ModelWeights without_head() const;
};

bool bit_identical(const ModelWeights& a, const ModelWeights& b);

/// Index ranges of [robustness | class | registers | patches] along the token axis.
struct SequenceLayout {
  Index rob_begin = 0, rob_end = 0;
  Index cls = 0;
  Index reg_begin = 0, reg_end = 0;
  Index patch_begin = 0, patch_end = 0;

  Index length() const { return patch_end; }
  Index num_rob() const { return rob_end - rob_begin; }
};

struct TokenSequence {
  Tensor tokens;  // [N, T, D]
  SequenceLayout layout;
};

/// Max |activation| over class and patch slots, one entry per layer
/// (embedding output, then each block output).
struct ActivationStats {
  std::vector<double> max_abs;
};

struct ForwardResult {
  TokenSequence output;                // after the final layer norm
  std::vector<ActivationStats> stats;  // one per sample
  std::vector<Tensor> hidden;          // depth + 1 residual-stream states [N, T, D]
};

/// Output class token followed by output patch tokens; register and
/// robustness slots are dropped.
struct FeatureSet {
  Tensor tokens;  // [N, 1 + P, D]

  Index batch() const { return tokens.dim(0); }
  Tensor class_feature() const;   // [N, D]
  Tensor patch_features() const;  // [N, P, D]
};

enum class FeatureAggregation { PerTokenMean, Flattened };

/// [N, C, H, W] -> [N, P, patch_size^2 * C], row-major patches, channel-last within a patch.
Tensor patchify(const Tensor& images, const ViTConfig& config);

TokenSequence embed(const ModelWeights& model, const Tensor& images, const std::optional<Tensor>& rob = std::nullopt);
ForwardResult forward(const ModelWeights& model, const TokenSequence& seq);
FeatureSet features(const ModelWeights& model, const Tensor& images, const std::optional<Tensor>& rob = std::nullopt);

/// Per-sample similarity of two feature sets: [N].
Tensor feature_cosine(const FeatureSet& a, const FeatureSet& b,
                      FeatureAggregation aggregation = FeatureAggregation::PerTokenMean);

/// Classifier logits from class features [N, D] -> [N, K].
Tensor head_logits(const Linear& head, const Tensor& class_features);

}  // namespace robtok
