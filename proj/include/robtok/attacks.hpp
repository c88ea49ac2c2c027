#pragma once

#include "robtok/vit.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace robtok {

inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

struct AttackConfig {
  int steps = 30;
  double eps_inf = 8.0 / 255.0;
  std::optional<double> step_size;  // defaults to eps_inf / 10
  bool quantize = true;
  double min_psnr_db = 40.0;
  double mse_weight = 1.0;
  /// Rescale each iterate toward the clean image whenever its PSNR would drop
  /// below min_psnr_db. Without it a saturated L-inf attack sits near 30 dB.
  bool psnr_projection = true;
  /// Optional uniform start offset as a fraction of the step size; 0 starts
  /// exactly at the clean image.
  double start_jitter = 0.0;
  std::uint64_t seed = 0;

  double step() const { return step_size.value_or(eps_inf / 10.0); }
  void validate() const;
};

struct AdversarialExample {
  Tensor image;  // [C, H, W]
  double psnr_db = kInfinitePsnr;
  std::vector<double> loss_trace;  // objective value before each step
  bool psnr_ok = true;
};

/// Any differentiable image -> features map. The attack only ever sees the
/// token-free backbone through this interface.
using FeatureFn = std::function<FeatureSet(const Tensor& images)>;

/// Per-sample objective that the feature attacks minimize:
/// feature_cosine(f(x_clean), f(x_adv)) - mse_weight * mse(x_clean, x_adv), shape [N].
Tensor attack_objective(const FeatureSet& clean_features, const FeatureSet& adv_features, const Tensor& x_clean,
                        const Tensor& x_adv, double mse_weight);

/// Batch mean of attack_objective on the token-free model.
Tensor attack_loss(const ModelWeights& model, const Tensor& x_clean, const Tensor& x_adv, const AttackConfig& cfg);

std::vector<AdversarialExample> pgd_feature_attack(const ModelWeights& model, const Tensor& x_clean,
                                                   const AttackConfig& cfg);
std::vector<AdversarialExample> pgd_feature_attack(const FeatureFn& f, const Tensor& x_clean, const AttackConfig& cfg,
                                                   const std::optional<Tensor>& init = std::nullopt);

/// One full-budget signed step: PGD with steps = 1 and step_size = eps_inf.
std::vector<AdversarialExample> fgsm_feature_attack(const ModelWeights& model, const Tensor& x_clean,
                                                    const AttackConfig& cfg);
std::vector<AdversarialExample> fgsm_feature_attack(const FeatureFn& f, const Tensor& x_clean, const AttackConfig& cfg,
                                                    const std::optional<Tensor>& init = std::nullopt);

/// PGD ascent on cross-entropy of head(class feature) against labels.
std::vector<AdversarialExample> pgd_task_attack(const ModelWeights& model, const Linear& head, const Tensor& x_clean,
                                                std::span<const int> labels, const AttackConfig& cfg);

/// 10 log10(1 / mse) with peak 1; identical inputs give kInfinitePsnr.
double psnr(const Vector& a, const Vector& b);
/// Round every value to the nearest k/255, ties upward.
Vector quantize(const Vector& x);
double quantize(double x);

Tensor stack_images(const std::vector<AdversarialExample>& examples);

/// Record of every model-level attack invocation, used to check that no
/// attack ever ran on a token-bearing sequence.
struct AttackAuditEntry {
  std::string family;
  Index batch = 0;
  Index sequence_length = 0;
  Index rob_slots = 0;
};

std::vector<AttackAuditEntry> attack_audit_log();
void clear_attack_audit_log();

}  // namespace robtok
