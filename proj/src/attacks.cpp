#include "robtok/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <random>

namespace robtok {

void AttackConfig::validate() const {
  if (steps < 0) throw ContractError("attack steps must be non-negative, got " + std::to_string(steps));
  if (!(eps_inf > 0.0 && eps_inf <= 1.0)) throw ContractError("eps_inf must lie in (0, 1]");
  if (!(step() > 0.0)) throw ContractError("attack step_size must be positive");
  if (!(start_jitter >= 0.0)) throw ContractError("start_jitter must be non-negative");
}

double quantize(double x) { return std::floor(std::clamp(x, 0.0, 1.0) * 255.0 + 0.5) / 255.0; }

Vector quantize(const Vector& x) {
  return x.unaryExpr([](double v) { return quantize(v); });
}

double psnr(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("psnr needs equal sizes");
  if (a.size() == 0) return kInfinitePsnr;
  const double err = (a - b).squaredNorm() / static_cast<double>(a.size());
  if (err == 0.0) return kInfinitePsnr;
  return 10.0 * std::log10(1.0 / err);
}

Tensor stack_images(const std::vector<AdversarialExample>& examples) {
  if (examples.empty()) throw ContractError("stack_images of an empty list");
  Shape shape = examples.front().image.shape();
  const Index per = examples.front().image.size();
  Vector all(per * static_cast<Index>(examples.size()));
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (examples[i].image.shape() != shape) throw ShapeError("stack_images: mixed image shapes");
    all.segment(static_cast<Index>(i) * per, per) = examples[i].image.value();
  }
  shape.insert(shape.begin(), static_cast<Index>(examples.size()));
  return Tensor(std::move(shape), std::move(all));
}

namespace {

std::mutex audit_mutex;
std::vector<AttackAuditEntry> audit_entries;

void audit(const ModelWeights& model, const Tensor& x_clean, const char* family) {
  // Build the sequence exactly as the attack's forward pass will see it.
  const TokenSequence seq = embed(model, slice(x_clean, 0, 0, std::min<Index>(1, x_clean.dim(0))));
  std::lock_guard lock(audit_mutex);
  audit_entries.push_back({family, x_clean.dim(0), seq.layout.length(), seq.layout.num_rob()});
}

Tensor per_sample_mse(const Tensor& x_clean, const Tensor& x_adv) {
  const Index n = x_clean.dim(0);
  return mean(reshape(square(x_adv - x_clean), {n, x_clean.size() / n}), 1);
}

void check_images(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("attack expects images [N, C, H, W], got " + to_string(x.shape()));
  if (x.size() > 0 && (x.value().minCoeff() < 0.0 || x.value().maxCoeff() > 1.0)) {
    throw ContractError("attack input pixels must lie in [0, 1]");
  }
}

using Objective = std::function<Tensor(const Tensor& x_adv)>;  // [N], minimized

struct Projector {
  const Vector& clean;
  Index per;
  double eps;
  double max_mse;  // < 0 disables the PSNR guard

  void apply(Vector& x) const {
    const Index n = clean.size() / per;
    for (Index s = 0; s < n; ++s) {
      auto xs = x.segment(s * per, per);
      auto cs = clean.segment(s * per, per);
      Vector delta = (xs - cs).cwiseMax(-eps).cwiseMin(eps);
      if (max_mse >= 0.0) {
        const double err = delta.squaredNorm() / static_cast<double>(per);
        if (err > max_mse) delta *= std::sqrt(max_mse / err) * (1.0 - 1e-12);
      }
      xs = (cs + delta).cwiseMax(0.0).cwiseMin(1.0);
    }
  }
};

// Rounding can push an iterate that sat on the PSNR floor just below it.
// Pixels that rounded away from the clean value are moved one level back,
// cheapest first (closest to the rounding boundary), until the floor holds.
Vector round_within_floor(const Vector& clean, const Vector& x, Vector q, double max_mse) {
  const double level = 1.0 / 255.0;
  const double budget = max_mse * static_cast<double>(clean.size()) * (1.0 - 1e-9);
  double err = (q - clean).squaredNorm();
  if (err <= budget) return q;

  struct Flip {
    Index i;
    double target;
    double extra;  // added distance from the continuous iterate
  };
  std::vector<Flip> flips;
  for (Index i = 0; i < q.size(); ++i) {
    const double d = q[i] - clean[i];
    if (std::abs(d) < level * 0.5) continue;
    const double target = quantize(q[i] - (d > 0 ? level : -level));
    if (std::abs(target - clean[i]) >= std::abs(d)) continue;
    flips.push_back({i, target, std::abs(target - x[i]) - std::abs(q[i] - x[i])});
  }
  std::stable_sort(flips.begin(), flips.end(), [](const Flip& a, const Flip& b) { return a.extra < b.extra; });
  for (const Flip& f : flips) {
    if (err <= budget) break;
    err += (f.target - clean[f.i]) * (f.target - clean[f.i]) - (q[f.i] - clean[f.i]) * (q[f.i] - clean[f.i]);
    q[f.i] = f.target;
  }
  // One pass of single-level flips can fall short when the iterate sits far
  // outside the floor; shrink toward clean as a last resort.
  for (double shrink = 0.95; (q - clean).squaredNorm() > budget && shrink > 1e-3; shrink *= 0.95) {
    q = quantize(Vector(clean + shrink * (x - clean)));
  }
  return q;
}

std::vector<AdversarialExample> signed_gradient_attack(const Objective& objective, const Tensor& x_clean,
                                                       const AttackConfig& cfg, const std::optional<Tensor>& init) {
  cfg.validate();
  check_images(x_clean);
  const Index n = x_clean.dim(0);
  const Index per = n > 0 ? x_clean.size() / n : 0;
  const Vector& clean = x_clean.value();
  const double floor_mse = std::pow(10.0, -cfg.min_psnr_db / 10.0);
  const Projector project{clean, per, cfg.eps_inf, cfg.psnr_projection ? floor_mse : -1.0};

  std::vector<AdversarialExample> out(static_cast<std::size_t>(n));
  Vector x = clean;
  if (init) {
    if (init->shape() != x_clean.shape()) throw ShapeError("attack init shape differs from the clean batch");
    x = init->value();
    project.apply(x);
  } else if (cfg.steps > 0 && cfg.start_jitter > 0.0) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const double scale = cfg.start_jitter * cfg.step();
    for (Index i = 0; i < x.size(); ++i) x[i] += scale * u(rng);
    project.apply(x);
  }

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor x_adv(x_clean.shape(), x, /*requires_grad=*/true);
    const Tensor losses = objective(x_adv);
    for (Index s = 0; s < n; ++s) out[static_cast<std::size_t>(s)].loss_trace.push_back(losses.value()[s]);
    backward(sum(losses));
    const Vector g = x_adv.grad();
    x -= cfg.step() * g.unaryExpr([](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
    project.apply(x);
  }

  Shape image_shape(x_clean.shape().begin() + 1, x_clean.shape().end());
  for (Index s = 0; s < n; ++s) {
    auto& ex = out[static_cast<std::size_t>(s)];
    const Vector cs = clean.segment(s * per, per);
    const Vector xs = x.segment(s * per, per);
    Vector final = cfg.quantize ? quantize(xs) : xs;
    if (cfg.quantize && cfg.psnr_projection) final = round_within_floor(cs, xs, final, floor_mse);
    ex.psnr_db = psnr(final, cs);
    ex.psnr_ok = ex.psnr_db >= cfg.min_psnr_db;
    ex.image = Tensor(image_shape, std::move(final));
  }
  return out;
}

AttackConfig as_fgsm(AttackConfig cfg) {
  cfg.steps = 1;
  cfg.step_size = cfg.eps_inf;
  return cfg;
}

FeatureFn token_free(const ModelWeights& model) {
  return [&model](const Tensor& images) { return features(model, images); };
}

}  // namespace

Tensor attack_objective(const FeatureSet& clean_features, const FeatureSet& adv_features, const Tensor& x_clean,
                        const Tensor& x_adv, double mse_weight) {
  if (x_clean.shape() != x_adv.shape()) {
    throw ShapeError("attack images differ in shape: " + to_string(x_clean.shape()) + " vs " + to_string(x_adv.shape()));
  }
  return feature_cosine(clean_features, adv_features) - mse_weight * per_sample_mse(x_clean, x_adv);
}

Tensor attack_loss(const ModelWeights& model, const Tensor& x_clean, const Tensor& x_adv, const AttackConfig& cfg) {
  const FeatureSet clean{features(model, x_clean.detach()).tokens.detach()};
  return mean(attack_objective(clean, features(model, x_adv), x_clean.detach(), x_adv, cfg.mse_weight));
}

std::vector<AdversarialExample> pgd_feature_attack(const FeatureFn& f, const Tensor& x_clean, const AttackConfig& cfg,
                                                   const std::optional<Tensor>& init) {
  const Tensor clean_images = x_clean.detach();
  const FeatureSet clean{f(clean_images).tokens.detach()};
  const Objective objective = [&](const Tensor& x_adv) {
    return attack_objective(clean, f(x_adv), clean_images, x_adv, cfg.mse_weight);
  };
  return signed_gradient_attack(objective, clean_images, cfg, init);
}

std::vector<AdversarialExample> pgd_feature_attack(const ModelWeights& model, const Tensor& x_clean,
                                                   const AttackConfig& cfg) {
  audit(model, x_clean, "pgd");
  return pgd_feature_attack(token_free(model), x_clean, cfg);
}

std::vector<AdversarialExample> fgsm_feature_attack(const FeatureFn& f, const Tensor& x_clean, const AttackConfig& cfg,
                                                    const std::optional<Tensor>& init) {
  return pgd_feature_attack(f, x_clean, as_fgsm(cfg), init);
}

std::vector<AdversarialExample> fgsm_feature_attack(const ModelWeights& model, const Tensor& x_clean,
                                                    const AttackConfig& cfg) {
  audit(model, x_clean, "fgsm");
  return pgd_feature_attack(token_free(model), x_clean, as_fgsm(cfg));
}

std::vector<AdversarialExample> pgd_task_attack(const ModelWeights& model, const Linear& head, const Tensor& x_clean,
                                                std::span<const int> labels, const AttackConfig& cfg) {
  const Index n = x_clean.rank() > 0 ? x_clean.dim(0) : 0;
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("pgd_task_attack: one label per image required");
  const Index k = head.weight.dim(1);
  std::vector<Index> picks(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw ContractError("pgd_task_attack: label out of range: " + std::to_string(labels[i]));
    picks[i] = static_cast<Index>(i) * k + labels[i];
  }
  audit(model, x_clean, "pgd-task");
  // Minimizing log p(y | x_adv) is ascent on the cross-entropy.
  const Objective objective = [&](const Tensor& x_adv) {
    const Tensor logp = log_softmax(head_logits(head, features(model, x_adv).class_feature()), 1);
    return gather(logp, picks, {n});
  };
  return signed_gradient_attack(objective, x_clean.detach(), cfg, std::nullopt);
}

std::vector<AttackAuditEntry> attack_audit_log() {
  std::lock_guard lock(audit_mutex);
  return audit_entries;
}

void clear_attack_audit_log() {
  std::lock_guard lock(audit_mutex);
  audit_entries.clear();
}

}  // namespace robtok
