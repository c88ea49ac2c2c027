#include "robtok/pretrain.hpp"

#include "robtok/probe.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>

namespace robtok {

namespace {

std::string describe_failure(double accuracy) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "pretraining failed: probe accuracy %.2f%% is below the qualification floor", accuracy);
  return buf;
}

}  // namespace

PretrainingFailed::PretrainingFailed(double accuracy) : std::runtime_error(describe_failure(accuracy)), accuracy_(accuracy) {}

LabeledBatch pretraining_corpus(const SyntheticDatasetSpec& spec, Index size) {
  SyntheticDatasetSpec s = spec;
  s.n_images = size;
  s.seed = spec.seed + 1000;
  s.train_fraction = 1.0;
  s.probe_fraction = 0.0;
  return generate_dataset(s).train;
}

PretrainResult pretrain_backbone(const ViTConfig& config, const LabeledBatch& train, const PretrainConfig& cfg) {
  return pretrain_backbone(config, train, train, cfg);
}

PretrainResult pretrain_backbone(const ViTConfig& config, const LabeledBatch& train, const LabeledBatch& qualify,
                                 const PretrainConfig& cfg) {
  config.validate();
  if (cfg.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
  AdamConfig adam{cfg.learning_rate};
  adam.validate();

  ModelWeights model = ModelWeights::init(config, cfg.seed, /*with_head=*/true);
  std::vector<Tensor> params;
  for (auto& [name, t] : model.named_tensors()) params.push_back(t);
  model.set_trainable(true);
  AdamState state = AdamState::zeros_like(params);

  PretrainResult result;
  std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A5ull);
  std::vector<Index> order(static_cast<std::size_t>(train.size()));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    Index batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const LabeledBatch batch = train.select(std::span<const Index>(order).subspan(b, e - b));
      const Tensor logits = head_logits(*model.head, features(model, batch.images).class_feature());
      const Tensor loss = cross_entropy(logits, batch.labels);
      backward(loss);
      adam_update(params, state, adam);
      for (Tensor& p : params) p.zero_grad();
      total += loss.item();
      ++batches;
    }
    result.epoch_loss.push_back(batches > 0 ? total / static_cast<double>(batches) : 0.0);
  }
  model.set_trainable(false);

  result.backbone = model.without_head();
  const RowMatrix feats = class_features(result.backbone, qualify.images);
  const ProbeHead probe = fit_linear_probe(feats, qualify.labels, config.num_classes).head;
  result.probe_accuracy = probe.accuracy(feats, qualify.labels);
  if (result.probe_accuracy < cfg.min_probe_accuracy) throw PretrainingFailed(result.probe_accuracy);
  return result;
}

}  // namespace robtok
