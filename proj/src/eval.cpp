#include "robtok/eval.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace robtok {

namespace {

Tensor rows(const Tensor& images, Index begin, Index end) {
  const Index per = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = end - begin;
  return Tensor(shape, images.value().segment(begin * per, (end - begin) * per));
}

// Sum of per-sample cosines between token-free clean features and features of
// `probe_images` under rob, accumulated in chunks to bound memory.
double cosine_sum(const ModelWeights& model, const std::optional<Tensor>& rob, const Tensor& clean,
                  const Tensor& probe_images, Index chunk) {
  double total = 0.0;
  const Index n = clean.dim(0);
  for (Index b = 0; b < n; b += chunk) {
    const Index e = std::min(n, b + chunk);
    const FeatureSet ref = features(model, rows(clean, b, e));
    const FeatureSet other = features(model, rows(probe_images, b, e), rob);
    total += feature_cosine(ref, other).value().sum();
  }
  return total;
}

std::vector<double> max_abs_series(const ModelWeights& model, const Tensor& image, const std::optional<Tensor>& rob) {
  return forward(model, embed(model, image, rob)).stats.at(0).max_abs;
}

double gap(const std::vector<double>& clean, const std::vector<double>& adv) {
  double g = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) g += std::abs(adv[i] - clean[i]);
  return g;
}

}  // namespace

std::string to_string(AttackFamily family) { return family == AttackFamily::Pgd ? "pgd" : "fgsm"; }

AttackFamily parse_attack_family(const std::string& name) {
  if (name == "pgd") return AttackFamily::Pgd;
  if (name == "fgsm") return AttackFamily::Fgsm;
  throw ConfigError("unknown attack family '" + name + "' (expected pgd or fgsm)");
}

Tensor craft_eval_adversaries(const ModelWeights& model, const Tensor& images, const AttackSpec& attack, Index chunk) {
  attack.config.validate();
  if (chunk < 1) throw ConfigError("chunk must be positive");
  const Index n = images.dim(0);
  const Index per = images.size() / std::max<Index>(n, 1);
  Vector out(images.size());
  for (Index b = 0; b < n; b += chunk) {
    const Index e = std::min(n, b + chunk);
    const Tensor x = rows(images, b, e);
    const auto adv = attack.family == AttackFamily::Pgd ? pgd_feature_attack(model, x, attack.config)
                                                        : fgsm_feature_attack(model, x, attack.config);
    out.segment(b * per, (e - b) * per) = stack_images(adv).value();
  }
  return Tensor(images.shape(), std::move(out));
}

EvalReport evaluate(const ModelWeights& model, const std::optional<Tensor>& rob, const ProbeHead& head,
                    const LabeledBatch& data, const std::optional<AttackSpec>& attack, const Tensor* adversaries) {
  constexpr Index kChunk = 64;
  EvalReport report;
  report.n_samples = data.size();
  report.attack = attack;
  report.tokens_used = rob.has_value();
  if (report.n_samples == 0) throw ContractError("evaluate needs at least one sample");

  report.clean_accuracy = head.accuracy(class_features(model, data.images, rob), data.labels);
  if (!attack) {
    report.adv_accuracy = report.clean_accuracy;
    report.feature_robustness =
        rob ? cosine_sum(model, rob, data.images, data.images, kChunk) / static_cast<double>(report.n_samples) : 1.0;
    return report;
  }
  const Tensor adv = adversaries ? *adversaries : craft_eval_adversaries(model, data.images, *attack, kChunk);
  if (adv.shape() != data.images.shape()) {
    throw ShapeError("evaluate: adversaries " + to_string(adv.shape()) + " do not match images " +
                     to_string(data.images.shape()));
  }
  report.adv_accuracy = head.accuracy(class_features(model, adv, rob), data.labels);
  report.feature_robustness = cosine_sum(model, rob, data.images, adv, kChunk) / static_cast<double>(report.n_samples);
  return report;
}

PairedEval evaluate_pair(const ModelWeights& model, const Tensor& rob, const ProbeHead& head_without,
                         const ProbeHead& head_with, const LabeledBatch& data, const AttackSpec& attack) {
  const Tensor adv = craft_eval_adversaries(model, data.images, attack);
  PairedEval out;
  out.baseline = evaluate(model, std::nullopt, head_without, data, attack, &adv);
  out.robust = evaluate(model, rob.detach(), head_with, data, attack, &adv);
  return out;
}

PairedEval generalization_eval(const ModelWeights& model, const Tensor& rob, const ProbeHead& head_without,
                               const ProbeHead& head_with, const LabeledBatch& data, const AttackConfig& attack) {
  return evaluate_pair(model, rob, head_without, head_with, data, AttackSpec{AttackFamily::Fgsm, attack});
}

double final_loss(const TrainRecord& record, int window) {
  if (window < 1 || static_cast<std::size_t>(window) > record.size()) {
    throw ContractError("final_loss: window " + std::to_string(window) + " needs at least that many rows, have " +
                        std::to_string(record.size()));
  }
  double s = 0.0;
  for (auto it = record.end() - window; it != record.end(); ++it) s += it->loss;
  return s / window;
}

AblationResult ablate_token_count(const ModelWeights& model, const LabeledBatch& data, const TrainConfig& cfg,
                                  const AttackConfig& attack, const std::vector<Index>& counts, int final_window) {
  if (counts.empty()) throw ConfigError("ablation needs at least one token count");
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1 || (i > 0 && counts[i] <= counts[i - 1])) {
      throw ConfigError("token counts must be positive and strictly increasing");
    }
  }
  if (final_window < 1 || final_window > cfg.max_steps) {
    throw ConfigError("final window must lie in [1, max_steps]");
  }

  // Crafted up front so that every leg, including the first, sees the same
  // adversaries and counts only its own token backwards.
  const auto schedule = batch_schedule(cfg, data.size());
  std::vector<Tensor> cache;
  cache.reserve(schedule.size());
  for (const auto& idx : schedule) {
    cache.push_back(craft_adversaries(model, data.select(idx).images, attack, cfg.psnr_retries));
  }
  const AdversaryProvider shared = [&](int step, const Tensor&) -> std::optional<Tensor> {
    return cache[static_cast<std::size_t>(step)];
  };

  AblationResult result;
  result.final_window = final_window;
  for (Index r : counts) {
    AblationLeg leg;
    leg.tokens = r;
    leg.record = train_loop(model, data, cfg, attack, r, shared).record;
    leg.final_loss = final_loss(leg.record, final_window);
    result.legs.push_back(std::move(leg));
  }
  result.baseline.tokens = 0;
  result.baseline.record = train_loop(model, data, cfg, attack, 0, shared).record;
  result.baseline.final_loss = final_loss(result.baseline.record, final_window);
  return result;
}

CosineSummary trailing_cosine_summary(const TrainRecord& record, int window) {
  if (window < 2 || static_cast<std::size_t>(window) > record.size()) {
    throw ContractError("trailing_cosine_summary: need at least " + std::to_string(std::max(window, 2)) +
                        " rows, have " + std::to_string(record.size()));
  }
  CosineSummary s;
  for (auto it = record.end() - window; it != record.end(); ++it) s.mean += it->loss_adv;
  s.mean /= window;
  double ss = 0.0;
  for (auto it = record.end() - window; it != record.end(); ++it) ss += (it->loss_adv - s.mean) * (it->loss_adv - s.mean);
  s.stddev = std::sqrt(ss / (window - 1));
  return s;
}

double ActivationReport::gap_without() const { return gap(clean_without, adv_without); }
double ActivationReport::gap_with() const { return gap(clean_with, adv_with); }

ActivationReport massive_activation_report(const ModelWeights& model, const Tensor& rob, const Tensor& image,
                                           const AttackConfig& attack) {
  Tensor x = image;
  if (image.rank() == 3) {
    x = Tensor({1, image.dim(0), image.dim(1), image.dim(2)}, image.value());
  } else if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("massive_activation_report takes a single image, got " + to_string(image.shape()));
  }
  const Tensor adv = craft_eval_adversaries(model, x, AttackSpec{AttackFamily::Pgd, attack});
  const Tensor r = rob.detach();
  ActivationReport report;
  report.clean_without = max_abs_series(model, x, std::nullopt);
  report.adv_without = max_abs_series(model, adv, std::nullopt);
  report.clean_with = max_abs_series(model, x, r);
  report.adv_with = max_abs_series(model, adv, r);
  return report;
}

}  // namespace robtok
