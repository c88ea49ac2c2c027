// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. The pretrained backbone is a shared fixture;
// its training time is reported separately and not charged to any criterion.

#include "cli.hpp"
#include "primitive_cases.hpp"
#include "robtok/checkpoint.hpp"
#include "robtok/eval.hpp"
#include "robtok/grad_check.hpp"
#include "robtok/io.hpp"
#include "robtok/pretrain.hpp"
#include "robtok/probe.hpp"
#include "robtok/training.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

using namespace robtok;
namespace fs = std::filesystem;
using robtok::testing::bit_equal;
using robtok::testing::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

// Everything the criteria share: data, backbone, and the default token run.
struct Fixture {
  SyntheticDatasetSpec spec;
  SyntheticDataset data;
  ModelWeights model;
  std::optional<TrainResult> run;
  double run_seconds = 0.0;
  std::optional<ProbeHead> head_without, head_with;

  const TrainResult& default_run() {
    if (!run) {
      const auto t = std::chrono::steady_clock::now();
      TrainConfig cfg;
      cfg.seed = spec.seed;
      run = train_loop(model, data.train, cfg, AttackConfig{}, 10);
      run_seconds = seconds_since(t);
    }
    return *run;
  }

  // Probe heads are fit on the probe split and scored on the evaluation split.
  void fit_heads() {
    if (head_without) return;
    const Tensor rob = default_run().rob.tokens.detach();
    head_without = train_linear_probe(model, std::nullopt, data.probe.images, data.probe.labels, spec.n_classes);
    head_with = train_linear_probe(model, rob, data.probe.images, data.probe.labels, spec.n_classes);
  }
};

Outcome gradient_correctness(Fixture& fx) {
  double worst_primitive = 0.0;
  std::string worst_name;
  for (const auto& p : robtok::testing::primitives()) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto r = grad_check([&](const Tensor& x) { return p.fn(x, seed); }, random_tensor(p.input, 1000 + seed));
      if (r.max_relative_error > worst_primitive) {
        worst_primitive = r.max_relative_error;
        worst_name = p.name;
      }
    }
  }
  // Full training objective w.r.t. the tokens on the pretrained backbone.
  double worst_e2e = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const LabeledBatch b = fx.data.train.range(static_cast<Index>(2 * seed), static_cast<Index>(2 * seed + 2));
    const Tensor adv = robtok::testing::random_images(2, fx.spec.image_size, 500 + seed);
    const Tensor point = random_tensor({2, fx.model.config.dim}, 700 + seed, -0.5, 0.5);
    const auto r = grad_check([&](const Tensor& rob) { return total_loss(fx.model, rob, b.images, adv).total; }, point);
    worst_e2e = std::max(worst_e2e, r.max_relative_error);
  }
  return {worst_primitive < 1e-4 && worst_e2e < 1e-3,
          "primitives worst " + fmt("%.2e", worst_primitive) + " (" + worst_name + "), end-to-end worst " +
              fmt("%.2e", worst_e2e)};
}

struct AttackBatch {
  Tensor clean;
  std::vector<AdversarialExample> adv;
};

AttackBatch& attacked64(Fixture& fx) {
  static std::optional<AttackBatch> cached;
  if (!cached) {
    const Tensor clean = fx.data.eval.range(0, 64).images;
    cached = AttackBatch{clean, pgd_feature_attack(fx.model, clean, AttackConfig{})};
  }
  return *cached;
}

Outcome attack_validity(Fixture& fx) {
  const AttackBatch& a = attacked64(fx);
  const Index per = a.clean.size() / 64;
  const double budget = 8.0 / 255.0 + 1.0 / 510.0;
  double worst_linf = 0.0, worst_grid = 0.0, min_psnr = kInfinitePsnr;
  for (Index i = 0; i < 64; ++i) {
    const Vector& x = a.adv[static_cast<std::size_t>(i)].image.value();
    const Vector c = a.clean.value().segment(i * per, per);
    worst_linf = std::max(worst_linf, (x - c).cwiseAbs().maxCoeff());
    for (Index k = 0; k < x.size(); ++k) worst_grid = std::max(worst_grid, std::abs(x[k] * 255.0 - std::round(x[k] * 255.0)));
    min_psnr = std::min(min_psnr, psnr(c, x));
  }
  const bool ok = worst_linf <= budget && worst_grid < 1e-9 && min_psnr >= 40.0;
  return {ok, fmt("max Linf %.5f (budget %.5f), grid error %.1e, min PSNR %.3f dB", worst_linf, budget, worst_grid,
                  min_psnr)};
}

Outcome attack_effectiveness(Fixture& fx) {
  const AttackBatch& a = attacked64(fx);
  const double cos =
      feature_cosine(features(fx.model, a.clean), features(fx.model, stack_images(a.adv))).value().mean();
  return {cos <= 0.5, fmt("mean feature cosine %.4f (limit 0.5)", cos)};
}

std::optional<PairedEval> pgd_pair;

Outcome defense_effectiveness(Fixture& fx) {
  const TrainResult& run = fx.default_run();
  fx.fit_heads();
  pgd_pair = evaluate_pair(fx.model, run.rob.tokens, *fx.head_without, *fx.head_with, fx.data.eval,
                           AttackSpec{AttackFamily::Pgd, AttackConfig{}});
  const double dcos = pgd_pair->robust.feature_robustness - pgd_pair->baseline.feature_robustness;
  const double dacc = pgd_pair->robust.adv_accuracy - pgd_pair->baseline.adv_accuracy;
  return {dcos >= 0.3 && dacc >= 15.0,
          fmt("cosine %.4f -> %.4f (gain %.4f, need 0.3); ", pgd_pair->baseline.feature_robustness,
              pgd_pair->robust.feature_robustness, dcos) +
              fmt("adv accuracy %.2f -> %.2f (gain %.2f, need 15)", pgd_pair->baseline.adv_accuracy,
                  pgd_pair->robust.adv_accuracy, dacc) +
              fmt("; token training %.1fs", fx.run_seconds)};
}

Outcome clean_retention(Fixture& fx) {
  fx.fit_heads();
  const Tensor rob = fx.default_run().rob.tokens.detach();
  const EvalReport without = evaluate(fx.model, std::nullopt, *fx.head_without, fx.data.eval, std::nullopt);
  const EvalReport with = evaluate(fx.model, rob, *fx.head_with, fx.data.eval, std::nullopt);
  const double delta = with.clean_accuracy - without.clean_accuracy;
  return {std::abs(delta) <= 2.0,
          fmt("clean accuracy %.2f without, %.2f with (delta %+.2f, limit 2.0)", without.clean_accuracy,
              with.clean_accuracy, delta)};
}

// Loss "at step s" is the mean over the 20 steps ending at s.
constexpr int kSmoothing = 20;

double window_mean(const TrainRecord& r, int end_step) {
  double s = 0.0;
  for (int i = end_step - kSmoothing; i < end_step; ++i) s += r[static_cast<std::size_t>(i)].loss;
  return s / kSmoothing;
}

Outcome convergence(Fixture& fx) {
  const TrainRecord& r = fx.default_run().record;
  if (r.size() != 400) return {false, "default run has " + std::to_string(r.size()) + " steps"};
  const double at200 = window_mean(r, 200), at400 = window_mean(r, 400);
  const double rel = std::abs(at200 - at400) / std::abs(at400);
  const long per_step = AttackConfig{}.steps + 1;
  bool counts_ok = true;
  for (const auto& row : r) counts_ok = counts_ok && row.grad_count == row.step * per_step;
  return {rel <= 0.05 && counts_ok,
          fmt("loss@200 %.4f, loss@400 %.4f (relative gap %.4f, limit 0.05); ", at200, at400, rel) +
              "grad count " + std::to_string(r.back().grad_count) + " vs " + std::to_string(400 * per_step) +
              (counts_ok ? " (exact every step)" : " (MISMATCH)")};
}

Outcome ablation(Fixture& fx) {
  TrainConfig cfg;
  cfg.seed = fx.spec.seed;
  const AblationResult res = ablate_token_count(fx.model, fx.data.train, cfg, AttackConfig{});
  std::map<Index, double> f;
  for (const auto& leg : res.legs) f[leg.tokens] = leg.final_loss;
  const double hi = std::max({f[10], f[20], f[50]}), lo = std::min({f[10], f[20], f[50]});
  bool bounded = true;
  for (const auto& leg : res.legs)
    for (const auto& row : leg.record) bounded = bounded && row.loss >= -2.0 && row.loss <= 2.0;
  const bool ok = f[1] > res.baseline.final_loss && hi - lo <= 0.02 && bounded;
  return {ok, fmt("final loss R=0 %.4f, R=1 %.4f, R=10 %.4f, ", res.baseline.final_loss, f[1], f[10]) +
                  fmt("R=20 %.4f, R=50 %.4f (spread %.4f, limit 0.02)", f[20], f[50], hi - lo)};
}

Outcome generalization(Fixture& fx) {
  fx.fit_heads();
  const PairedEval p =
      generalization_eval(fx.model, fx.default_run().rob.tokens, *fx.head_without, *fx.head_with, fx.data.eval,
                          AttackConfig{});
  const double dacc = p.robust.adv_accuracy - p.baseline.adv_accuracy;
  return {dacc >= 10.0, fmt("FGSM adv accuracy %.2f -> %.2f (gain %.2f, need 10); cosine %.4f", p.baseline.adv_accuracy,
                            p.robust.adv_accuracy, dacc, p.baseline.feature_robustness) +
                            fmt(" -> %.4f", p.robust.feature_robustness)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Relative path -> contents for every file under dir.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return files;
}

bool pipeline(const fs::path& root, std::string& why) {
  const std::vector<std::string> small{"--seed",          "11", "--pretrain.epochs", "1", "--pretrain.corpus_size", "320",
                                       "--pretrain.min_probe_accuracy", "0", "--train.max_steps", "4",
                                       "--train.record_wall_time", "false", "--attack.steps", "3",
                                       "--eval-samples", "16"};
  auto run = [&](std::vector<std::string> args) {
    args.insert(args.end(), small.begin(), small.end());
    std::ostringstream out, err;
    const int code = robtok::cli::run(args, out, err);
    if (code != 0) why += args[0] + " exited " + std::to_string(code) + ": " + err.str();
    return code == 0;
  };
  const std::string m = (root / "model" / "m.ckpt").string();
  const std::string tokens = (root / "train" / "tokens.ckpt").string();
  return run({"pretrain", "--out", m}) && run({"train-rob", "--model", m, "--out", (root / "train").string()}) &&
         run({"attack", "--model", m, "--out", (root / "attack").string(), "--count", "4"}) &&
         run({"eval", "--model", m, "--out", (root / "eval").string()}) &&
         run({"eval", "--model", m, "--tokens", tokens, "--eval", "generalization", "--out",
              (root / "gen").string()}) &&
         run({"ablate", "--model", m, "--counts", "1,2", "--train.max_steps", "20", "--out",
              (root / "ablate").string()}) &&
         run({"probe-activations", "--model", m, "--tokens", tokens, "--out", (root / "act").string()});
}

Outcome infrastructure(Fixture& fx) {
  std::mt19937_64 rng(99);
  int roundtrip_failures = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Checkpoint c;
    c.config = fx.model.config;
    c.seed = rng();
    const int count = static_cast<int>(rng() % 6);
    for (int t = 0; t < count; ++t) {
      Shape shape;
      const int rank = static_cast<int>(rng() % 4);
      for (int d = 0; d < rank; ++d) shape.push_back(static_cast<Index>(rng() % 5));
      std::string name = "t" + std::to_string(trial) + "." + std::string(rng() % 9, 'x');
      Tensor v = random_tensor(shape, rng(), -1e6, 1e6);
      c.tensors.emplace_back(name, v);
    }
    const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(c));
    bool same = back.tensors.size() == c.tensors.size() && back.seed == c.seed && back.config == c.config;
    for (std::size_t i = 0; same && i < c.tensors.size(); ++i) {
      same = back.tensors[i].first == c.tensors[i].first &&
             back.tensors[i].second.shape() == c.tensors[i].second.shape() &&
             bit_equal(back.tensors[i].second.value(), c.tensors[i].second.value());
    }
    roundtrip_failures += same ? 0 : 1;
  }

  const SyntheticDataset again = generate_dataset(fx.spec);
  const bool deterministic = bit_equal(again.train.images.value(), fx.data.train.images.value()) &&
                             bit_equal(again.eval.images.value(), fx.data.eval.images.value()) &&
                             again.train.labels == fx.data.train.labels;
  bool balanced = true;
  for (const LabeledBatch* split : {&fx.data.train, &fx.data.probe, &fx.data.eval}) {
    std::vector<Index> n(static_cast<std::size_t>(fx.spec.n_classes), 0);
    for (int y : split->labels) ++n[static_cast<std::size_t>(y)];
    const auto [mn, mx] = std::minmax_element(n.begin(), n.end());
    balanced = balanced && *mx - *mn <= 1;
  }

  const fs::path root = fs::temp_directory_path() / ("robtok_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  std::string why;
  const bool ran = pipeline(root / "a", why) && pipeline(root / "b", why);
  bool identical = false;
  std::size_t files = 0;
  if (ran) {
    const auto a = snapshot(root / "a"), b = snapshot(root / "b");
    identical = a == b;
    files = a.size();
  }
  fs::remove_all(root);
  const bool ok = roundtrip_failures == 0 && deterministic && balanced && ran && identical;
  return {ok, "checkpoint fuzz failures " + std::to_string(roundtrip_failures) + "/50; dataset deterministic " +
                  (deterministic ? "yes" : "no") + ", balanced " + (balanced ? "yes" : "no") +
                  "; pipeline outputs " + (ran ? (identical ? "byte-identical" : "DIFFER") : "failed: " + why) +
                  " across two runs (" + std::to_string(files) + " files)"};
}

std::vector<double> brute_force_max_abs(const ModelWeights& model, const Tensor& image, const std::optional<Tensor>& rob) {
  const TokenSequence seq = embed(model, image, rob);
  const ForwardResult out = forward(model, seq);
  const auto& l = seq.layout;
  const Index d = model.config.dim;
  std::vector<double> series;
  for (const Tensor& h : out.hidden) {
    double m = 0.0;
    for (Index tok = 0; tok < l.length(); ++tok) {
      if (tok != l.cls && (tok < l.patch_begin || tok >= l.patch_end)) continue;
      for (Index j = 0; j < d; ++j) m = std::max(m, std::abs(h.value()[tok * d + j]));
    }
    series.push_back(m);
  }
  return series;
}

Outcome activation_probe(Fixture& fx) {
  const Tensor rob = fx.default_run().rob.tokens.detach();
  const Tensor image = fx.data.eval.range(0, 1).images;
  const AttackConfig attack;
  const ActivationReport rep = massive_activation_report(fx.model, rob, image, attack);
  const Tensor adv = craft_eval_adversaries(fx.model, image, AttackSpec{AttackFamily::Pgd, attack});
  const bool scans = rep.clean_without == brute_force_max_abs(fx.model, image, std::nullopt) &&
                     rep.adv_without == brute_force_max_abs(fx.model, adv, std::nullopt) &&
                     rep.clean_with == brute_force_max_abs(fx.model, image, rob) &&
                     rep.adv_with == brute_force_max_abs(fx.model, adv, rob);
  const bool lengths = rep.layers() == static_cast<std::size_t>(fx.model.config.depth + 1) &&
                       rep.adv_without.size() == rep.layers() && rep.clean_with.size() == rep.layers() &&
                       rep.adv_with.size() == rep.layers();
  const ActivationReport empty =
      massive_activation_report(fx.model, Tensor::zeros({0, fx.model.config.dim}), image, attack);
  const bool collapse = empty.clean_with == empty.clean_without && empty.adv_with == empty.adv_without;
  return {scans && lengths && collapse,
          std::string("brute-force scans ") + (scans ? "match" : "DIFFER") + ", lengths " + (lengths ? "ok" : "wrong") +
              ", R=0 collapse " + (collapse ? "bit-exact" : "BROKEN") +
              fmt("; gap without tokens %.4f, with tokens %.4f (reported only)", rep.gap_without(), rep.gap_with())};
}

}  // namespace

int main() {
  Fixture fx;
  {
    const auto t = std::chrono::steady_clock::now();
    fx.data = generate_dataset(fx.spec);
    PretrainConfig pc;
    pc.seed = fx.spec.seed;
    const PretrainResult pre =
        pretrain_backbone(ViTConfig{}, pretraining_corpus(fx.spec, pc.corpus_size), fx.data.train, pc);
    fx.model = pre.backbone;
    std::printf("fixture: backbone pretrained in %.1fs, train-split probe accuracy %.2f%%\n", seconds_since(t),
                pre.probe_accuracy);
    std::fflush(stdout);
  }

  struct Criterion {
    int id;
    const char* title;
    double limit_seconds;  // 0 = no runtime bound
    std::function<Outcome(Fixture&)> fn;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", 60, gradient_correctness},
      {2, "attack validity", 120, attack_validity},
      {3, "attack effectiveness", 120, attack_effectiveness},
      {4, "defense effectiveness", 600, defense_effectiveness},
      {5, "clean retention", 300, clean_retention},
      {6, "convergence efficiency", 0, convergence},
      {7, "token-count ablation", 1800, ablation},
      {8, "generalization to FGSM", 300, generalization},
      {9, "infrastructure properties", 0, infrastructure},
      {10, "activation probe", 0, activation_probe},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn(fx);
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    // The shared token run is charged to criterion 4, the first to use it.
    const double secs = seconds_since(t);
    const bool in_time = c.limit_seconds == 0 || secs < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    std::printf("AC%-2d %s  %s: %s [%.1fs%s]\n", c.id, pass ? "PASS" : "FAIL", c.title, o.detail.c_str(), secs,
                c.limit_seconds > 0 ? fmt(", limit %.0fs", c.limit_seconds).c_str() : "");
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
