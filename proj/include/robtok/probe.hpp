#pragma once

#include "robtok/vit.hpp"

#include <optional>
#include <span>

namespace robtok {

/// Linear classifier on frozen class features: logits = features * weight + bias.
struct ProbeHead {
  RowMatrix weight;  // [D, K]
  Vector bias;       // [K]

  Index num_classes() const { return weight.cols(); }
  RowMatrix logits(const RowMatrix& features) const;
  std::vector<int> predict(const RowMatrix& features) const;
  /// Percent correct in [0, 100].
  double accuracy(const RowMatrix& features, std::span<const int> labels) const;
  Linear as_linear() const;
};

struct ProbeConfig {
  int max_iterations = 2000;
  double tolerance = 1e-6;  // stop once |loss delta| falls below this
};

struct ProbeFit {
  ProbeHead head;
  int iterations = 0;
  double final_loss = 0.0;
};

/// Full-batch gradient descent on multinomial logistic loss. The step size is
/// 1/L with L the smoothness bound of the loss, so the loss never increases.
ProbeFit fit_linear_probe(const RowMatrix& features, std::span<const int> labels, int num_classes,
                          const ProbeConfig& cfg = {});

/// Class features [N, D] for a stack of images, computed in chunks without a tape.
RowMatrix class_features(const ModelWeights& model, const Tensor& images, const std::optional<Tensor>& rob = std::nullopt,
                         Index chunk = 64);

ProbeHead train_linear_probe(const ModelWeights& model, const std::optional<Tensor>& rob, const Tensor& images,
                             std::span<const int> labels, int num_classes, const ProbeConfig& cfg = {});

}  // namespace robtok
