#pragma once

#include "robtok/attacks.hpp"
#include "robtok/dataset.hpp"
#include "robtok/optim.hpp"
#include "robtok/vit.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

namespace robtok {

/// A model weight picked up a gradient during token training.
class InvariantViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct RobTokens {
  Tensor tokens;  // [R, D], the only trainable values

  Index count() const { return tokens.dim(0); }
  Index width() const { return tokens.dim(1); }

  /// Zero-mean Gaussian with std 0.02. count may be 0.
  static RobTokens init(Index count, Index dim, std::uint64_t seed);
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  Index batch_size = 8;
  int max_steps = 400;
  Index dataset_size = 1600;
  std::uint64_t seed = 0;
  double lambda_adv = 1.0;  // weight of the adversarial term
  int psnr_retries = 3;
  bool record_wall_time = true;  // off gives byte-stable records

  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }
  void validate() const;
};

struct TrainRow {
  int step = 0;
  double loss = 0.0;  // loss_inv + lambda * loss_adv, the maximized objective
  double loss_inv = 0.0;
  double loss_adv = 0.0;
  long grad_count = 0;
  double wall_ms = 0.0;
};

using TrainRecord = std::vector<TrainRow>;

/// Mean over the batch of feature_cosine(f([r, x]), f(x)); f(x) is a constant.
Tensor loss_inv(const ModelWeights& model, const Tensor& rob, const Tensor& batch);
Tensor loss_inv(const ModelWeights& model, const Tensor& rob, const Tensor& batch, const FeatureSet& clean);

/// Mean over the batch of feature_cosine(f([r, x_adv]), f(x)).
Tensor loss_adv(const ModelWeights& model, const Tensor& rob, const Tensor& batch, const Tensor& adv_batch);
Tensor loss_adv(const ModelWeights& model, const Tensor& rob, const Tensor& adv_batch, const FeatureSet& clean);

struct LossTerms {
  Tensor total;
  Tensor inv;
  Tensor adv;
};

LossTerms total_loss(const ModelWeights& model, const Tensor& rob, const Tensor& batch, const Tensor& adv_batch,
                     double lambda_adv = 1.0);

/// Adversaries for one batch, crafted on the token-free model. Samples whose
/// PSNR check fails are re-attacked at half the step size, up to
/// cfg.psnr_retries times, and then replaced by their clean image.
Tensor craft_adversaries(const ModelWeights& model, const Tensor& batch, const AttackConfig& attack, int retries);

struct TrainState {
  RobTokens rob;
  AdamState adam;
};

/// One optimization step on the tokens. adv_batch may be supplied by a caller
/// that already crafted it (it never depends on the tokens); otherwise it is
/// crafted here.
TrainRow train_step(const ModelWeights& model, TrainState& state, const Tensor& batch, const AttackConfig& attack,
                    const TrainConfig& cfg, const Tensor* adv_batch = nullptr);

/// Supplies the adversarial batch for a step, e.g. from a cache shared by
/// several runs over the same data order. Returning nullopt crafts it fresh.
using AdversaryProvider = std::function<std::optional<Tensor>(int step, const Tensor& batch)>;

struct TrainResult {
  RobTokens rob;
  AdamState adam;
  TrainRecord record;
};

/// Batch order for a run: a fresh shuffle of [0, dataset_size) each epoch,
/// incomplete trailing batches dropped.
std::vector<std::vector<Index>> batch_schedule(const TrainConfig& cfg, Index available);

TrainResult train_loop(const ModelWeights& model, const LabeledBatch& data, const TrainConfig& cfg,
                       const AttackConfig& attack, Index num_tokens, const AdversaryProvider& provider = {});

}  // namespace robtok
