#pragma once

#include "robtok/dataset.hpp"
#include "robtok/optim.hpp"
#include "robtok/vit.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace robtok {

struct PretrainConfig {
  int epochs = 10;
  double learning_rate = 1e-3;
  Index batch_size = 32;
  std::uint64_t seed = 7;
  double min_probe_accuracy = 80.0;  // percent, on the training split
  /// Images in the separate pretraining corpus (see pretraining_corpus).
  Index corpus_size = 6400;
};

/// A larger draw from the same generator, seeded apart from the experiment
/// dataset, used only to pretrain the backbone. All of it is training data.
LabeledBatch pretraining_corpus(const SyntheticDatasetSpec& spec, Index size);

/// The backbone did not reach the qualification floor.
class PretrainingFailed : public std::runtime_error {
 public:
  explicit PretrainingFailed(double accuracy);
  double accuracy() const { return accuracy_; }

 private:
  double accuracy_;
};

struct PretrainResult {
  ModelWeights backbone;  // classifier head removed
  double probe_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Supervised cross-entropy training of a fresh ViT plus head on `corpus`. The
/// head is dropped before qualification, which fits a new linear probe on
/// frozen class features of `qualify` (the experiment's training split).
/// Throws PretrainingFailed below the floor.
PretrainResult pretrain_backbone(const ViTConfig& config, const LabeledBatch& corpus, const LabeledBatch& qualify,
                                 const PretrainConfig& cfg);

/// Same, qualifying on the training data itself.
PretrainResult pretrain_backbone(const ViTConfig& config, const LabeledBatch& train, const PretrainConfig& cfg);

}  // namespace robtok
