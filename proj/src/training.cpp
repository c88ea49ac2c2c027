#include "robtok/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace robtok {

RobTokens RobTokens::init(Index count, Index dim, std::uint64_t seed) {
  if (count < 0 || dim < 1) throw ConfigError("robustness tokens need count >= 0 and dim >= 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 0.02);
  Vector v(count * dim);
  for (Index i = 0; i < v.size(); ++i) v[i] = g(rng);
  return RobTokens{Tensor({count, dim}, std::move(v), /*requires_grad=*/true)};
}

void TrainConfig::validate() const {
  adam().validate();
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (dataset_size < batch_size) throw ConfigError("dataset_size must hold at least one batch");
  if (!std::isfinite(lambda_adv)) throw ConfigError("lambda_adv must be finite");
  if (psnr_retries < 0) throw ConfigError("psnr_retries must be non-negative");
}

Tensor loss_inv(const ModelWeights& model, const Tensor& rob, const Tensor& batch, const FeatureSet& clean) {
  return mean(feature_cosine(features(model, batch, rob), clean));
}

Tensor loss_inv(const ModelWeights& model, const Tensor& rob, const Tensor& batch) {
  return loss_inv(model, rob, batch, FeatureSet{features(model, batch).tokens.detach()});
}

Tensor loss_adv(const ModelWeights& model, const Tensor& rob, const Tensor& adv_batch, const FeatureSet& clean) {
  if (adv_batch.rank() < 1 || adv_batch.dim(0) != clean.batch()) {
    throw ShapeError("loss_adv: adversarial batch " + to_string(adv_batch.shape()) + " does not match " +
                     std::to_string(clean.batch()) + " clean samples");
  }
  return mean(feature_cosine(features(model, adv_batch, rob), clean));
}

Tensor loss_adv(const ModelWeights& model, const Tensor& rob, const Tensor& batch, const Tensor& adv_batch) {
  if (batch.shape() != adv_batch.shape()) {
    throw ShapeError("loss_adv: batch " + to_string(batch.shape()) + " vs adversarial batch " +
                     to_string(adv_batch.shape()));
  }
  return loss_adv(model, rob, adv_batch, FeatureSet{features(model, batch).tokens.detach()});
}

LossTerms total_loss(const ModelWeights& model, const Tensor& rob, const Tensor& batch, const Tensor& adv_batch,
                     double lambda_adv) {
  if (batch.shape() != adv_batch.shape()) {
    throw ShapeError("total_loss: batch " + to_string(batch.shape()) + " vs adversarial batch " +
                     to_string(adv_batch.shape()));
  }
  const FeatureSet clean{features(model, batch).tokens.detach()};
  LossTerms t;
  t.inv = loss_inv(model, rob, batch, clean);
  t.adv = loss_adv(model, rob, adv_batch, clean);
  t.total = t.inv + lambda_adv * t.adv;
  return t;
}

Tensor craft_adversaries(const ModelWeights& model, const Tensor& batch, const AttackConfig& attack, int retries) {
  const Index n = batch.dim(0);
  const Index per = batch.size() / std::max<Index>(n, 1);
  Vector out = batch.value();
  std::vector<Index> pending(static_cast<std::size_t>(n));
  std::iota(pending.begin(), pending.end(), Index{0});

  AttackConfig cfg = attack;
  for (int round = 0; round <= retries && !pending.empty(); ++round) {
    if (round > 0) cfg.step_size = cfg.step() / 2.0;
    Shape shape = batch.shape();
    shape[0] = static_cast<Index>(pending.size());
    Vector sub(shape[0] * per);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      sub.segment(static_cast<Index>(i) * per, per) = batch.value().segment(pending[i] * per, per);
    }
    const auto adv = pgd_feature_attack(model, Tensor(shape, std::move(sub)), cfg);
    std::vector<Index> failed;
    for (std::size_t i = 0; i < pending.size(); ++i) {
      if (adv[i].psnr_ok) {
        out.segment(pending[i] * per, per) = adv[i].image.value();
      } else {
        failed.push_back(pending[i]);
      }
    }
    pending = std::move(failed);
  }
  // Whatever is still pending keeps its clean pixels.
  return Tensor(batch.shape(), std::move(out));
}

TrainRow train_step(const ModelWeights& model, TrainState& state, const Tensor& batch, const AttackConfig& attack,
                    const TrainConfig& cfg, const Tensor* adv_batch) {
  const long grads_before = gradient_count();
  const Tensor adv = adv_batch ? adv_batch->detach() : craft_adversaries(model, batch, attack, cfg.psnr_retries);

  Tensor& rob = state.rob.tokens;
  if (!rob.requires_grad()) throw ContractError("robustness tokens must require gradients");
  rob.zero_grad();
  const LossTerms terms = total_loss(model, rob, batch, adv, cfg.lambda_adv);
  backward(-terms.total);

  for (const auto& [name, t] : model.named_tensors()) {
    if (t.has_grad()) throw InvariantViolation("model weight '" + name + "' received a gradient during token training");
  }
  std::vector<Tensor> params{rob};
  adam_update(params, state.adam, cfg.adam());
  rob.zero_grad();

  TrainRow row;
  row.loss = terms.total.item();
  row.loss_inv = terms.inv.item();
  row.loss_adv = terms.adv.item();
  row.grad_count = gradient_count() - grads_before;
  return row;
}

std::vector<std::vector<Index>> batch_schedule(const TrainConfig& cfg, Index available) {
  cfg.validate();
  if (available < cfg.dataset_size) {
    throw ConfigError("training needs " + std::to_string(cfg.dataset_size) + " images but only " +
                      std::to_string(available) + " are available");
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<Index> order(static_cast<std::size_t>(cfg.dataset_size));
  std::vector<std::vector<Index>> batches;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::size_t cursor = order.size();
  while (static_cast<int>(batches.size()) < cfg.max_steps) {
    if (cursor + bs > order.size()) {
      std::iota(order.begin(), order.end(), Index{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(cursor),
                         order.begin() + static_cast<std::ptrdiff_t>(cursor + bs));
    cursor += bs;
  }
  return batches;
}

TrainResult train_loop(const ModelWeights& model, const LabeledBatch& data, const TrainConfig& cfg,
                       const AttackConfig& attack, Index num_tokens, const AdversaryProvider& provider) {
  attack.validate();
  const auto schedule = batch_schedule(cfg, data.size());
  TrainState state{RobTokens::init(num_tokens, model.config.dim, cfg.seed ^ 0x5EC2E7ull), {}};
  state.adam = AdamState::zeros_like({state.rob.tokens});

  TrainResult result;
  const auto start = std::chrono::steady_clock::now();
  long grads = 0;
  for (int step = 0; step < cfg.max_steps; ++step) {
    const Tensor batch = data.select(schedule[static_cast<std::size_t>(step)]).images;
    std::optional<Tensor> cached;
    if (provider) cached = provider(step, batch);
    TrainRow row = train_step(model, state, batch, attack, cfg, cached ? &*cached : nullptr);
    grads += row.grad_count;
    row.step = step + 1;
    row.grad_count = grads;
    if (cfg.record_wall_time) {
      row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
    result.record.push_back(row);
  }
  result.rob = state.rob;
  result.adam = std::move(state.adam);
  return result;
}

}  // namespace robtok
