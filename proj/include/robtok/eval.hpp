#pragma once

#include "robtok/attacks.hpp"
#include "robtok/dataset.hpp"
#include "robtok/probe.hpp"
#include "robtok/training.hpp"
#include "robtok/vit.hpp"

#include <optional>
#include <string>
#include <vector>

namespace robtok {

enum class AttackFamily { Pgd, Fgsm };

std::string to_string(AttackFamily family);
/// "pgd" or "fgsm"; anything else throws ConfigError.
AttackFamily parse_attack_family(const std::string& name);

struct AttackSpec {
  AttackFamily family = AttackFamily::Pgd;
  AttackConfig config;
};

/// Adversaries for every image, crafted on the token-free model in chunks.
Tensor craft_eval_adversaries(const ModelWeights& model, const Tensor& images, const AttackSpec& attack,
                              Index chunk = 64);

struct EvalReport {
  double clean_accuracy = 0.0;  // percent
  double adv_accuracy = 0.0;    // percent; equals clean_accuracy without an attack
  double feature_robustness = 1.0;
  Index n_samples = 0;
  std::optional<AttackSpec> attack;
  bool tokens_used = false;
};

/// Clean accuracy, accuracy on attacked images and the mean feature cosine
/// between token-free clean features and features of the attacked image under
/// `rob`. Without an attack the cosine compares clean images with and without
/// tokens. Adversaries are crafted on the token-free model unless supplied.
EvalReport evaluate(const ModelWeights& model, const std::optional<Tensor>& rob, const ProbeHead& head,
                    const LabeledBatch& data, const std::optional<AttackSpec>& attack,
                    const Tensor* adversaries = nullptr);

struct PairedEval {
  EvalReport baseline;  // no tokens
  EvalReport robust;    // with tokens
};

/// Both conditions on the same adversaries, crafted once. Each condition uses
/// its own probe head.
PairedEval evaluate_pair(const ModelWeights& model, const Tensor& rob, const ProbeHead& head_without,
                         const ProbeHead& head_with, const LabeledBatch& data, const AttackSpec& attack);

/// evaluate_pair under the single-step attack, which the tokens never saw
/// during training.
PairedEval generalization_eval(const ModelWeights& model, const Tensor& rob, const ProbeHead& head_without,
                               const ProbeHead& head_with, const LabeledBatch& data, const AttackConfig& attack);

struct AblationLeg {
  Index tokens = 0;
  double final_loss = 0.0;
  TrainRecord record;
};

struct AblationResult {
  std::vector<AblationLeg> legs;  // strictly increasing token counts
  AblationLeg baseline;           // no tokens, same batches and adversaries
  int final_window = 20;
};

/// Mean total loss over the last `window` rows.
double final_loss(const TrainRecord& record, int window);

/// One train_loop per count with the same seed and batch order. Adversaries
/// never depend on the tokens, so they are crafted once per step before the
/// legs run and shared by all of them; grad_count in each record therefore
/// counts only that leg's token backwards.
AblationResult ablate_token_count(const ModelWeights& model, const LabeledBatch& data, const TrainConfig& cfg,
                                  const AttackConfig& attack, const std::vector<Index>& counts = {1, 10, 20, 50},
                                  int final_window = 20);

struct CosineSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation
};

/// loss_adv over the last `window` steps.
CosineSummary trailing_cosine_summary(const TrainRecord& record, int window = 100);

struct ActivationReport {
  std::vector<double> clean_without;
  std::vector<double> adv_without;
  std::vector<double> clean_with;
  std::vector<double> adv_with;

  std::size_t layers() const { return clean_without.size(); }
  /// Sum over layers of |adv - clean| for each condition.
  double gap_without() const;
  double gap_with() const;
};

/// Four forward passes on one image [1, C, H, W] or [C, H, W]; the adversary is
/// crafted on the token-free model.
ActivationReport massive_activation_report(const ModelWeights& model, const Tensor& rob, const Tensor& image,
                                           const AttackConfig& attack);

}  // namespace robtok
