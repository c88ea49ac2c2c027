#include "cli.hpp"

#include "robtok/checkpoint.hpp"
#include "robtok/eval.hpp"
#include "robtok/io.hpp"
#include "robtok/pretrain.hpp"
#include "robtok/probe.hpp"
#include "robtok/run_config.hpp"
#include "robtok/training.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>

namespace robtok::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<Index> num_tokens;
  std::optional<Index> eval_samples;
  std::string counts;
  std::map<std::string, std::string> overrides;  // "section.key" -> raw value

  std::string model_path;
  std::string tokens_path;
  std::string out;
  std::string attack = "pgd";
  std::string eval = "standard";
  std::string images_dir;
  Index count = 8;
  Index index = 0;
};

std::vector<Index> parse_counts(const std::string& text) {
  std::vector<Index> counts;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    try {
      std::size_t used = 0;
      counts.push_back(std::stoll(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("--counts expects comma-separated integers, got '" + text + "'");
    }
    pos = comma + 1;
  }
  return counts;
}

// Flag values are read as JSON when they parse (numbers, booleans), otherwise
// taken as strings.
json flag_value(const std::string& raw) {
  try {
    return json::parse(raw);
  } catch (const json::parse_error&) {
    return raw;
  }
}

RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) from_json(read_json(o.config_path), cfg);
  json j = cfg;
  for (const auto& [path, raw] : o.overrides) {
    const auto dot = path.find('.');
    j[path.substr(0, dot)][path.substr(dot + 1)] = flag_value(raw);
  }
  from_json(j, cfg);
  if (o.seed) cfg.seed = *o.seed;
  if (o.num_tokens) cfg.num_tokens = *o.num_tokens;
  if (o.eval_samples) cfg.eval_samples = *o.eval_samples;
  if (!o.counts.empty()) cfg.counts = parse_counts(o.counts);
  if (o.threads) {
    cfg.threads = *o.threads;
  } else if (const char* env = std::getenv("ROBTOK_THREADS")) {
    try {
      cfg.threads = std::stoi(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("ROBTOK_THREADS must be an integer, got '") + env + "'");
    }
  }
  cfg.resolve();
  // Computation is single-threaded; the cap only reaches Eigen.
  Eigen::setNbThreads(cfg.threads);
  return cfg;
}

void echo_config(const fs::path& dir, const RunConfig& cfg) { write_json(dir / "config.json", json(cfg)); }

fs::path make_dir(const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  const fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  return dir;
}

ModelWeights load_model(const std::string& path, RunConfig& cfg) {
  if (path.empty()) throw ConfigError("--model is required");
  ModelWeights model = model_from_checkpoint(load_checkpoint(path));
  if (model.config.image_size != cfg.data.image_size || model.config.num_classes != cfg.data.n_classes) {
    throw ContractError("model '" + path + "' was built for a different image size or class count");
  }
  cfg.vit = model.config;
  return model;
}

Tensor load_tokens(const std::string& path, const ModelWeights& model) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.config == model.config)) throw ContractError("tokens in '" + path + "' belong to a different backbone");
  const Tensor* t = ckpt.find(kRobTokensName);
  if (!t) throw CheckpointError("'" + path + "' holds no " + kRobTokensName + " tensor");
  if (t->rank() != 2 || t->dim(1) != model.config.dim) {
    throw ContractError("tokens in '" + path + "' have shape " + to_string(t->shape()));
  }
  return t->detach();
}

LabeledBatch eval_split(const SyntheticDataset& ds, const RunConfig& cfg) {
  const Index n = cfg.eval_samples > 0 ? std::min(cfg.eval_samples, ds.eval.size()) : ds.eval.size();
  return ds.eval.range(0, n);
}

int cmd_pretrain(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  if (o.out.empty()) throw ConfigError("--out is required");
  const fs::path path(o.out);
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  make_dir(dir.string());
  const SyntheticDataset ds = generate_dataset(cfg.data);
  const PretrainResult res =
      pretrain_backbone(cfg.vit, pretraining_corpus(cfg.data, cfg.pretrain.corpus_size), ds.train, cfg.pretrain);
  save_checkpoint(path, model_checkpoint(res.backbone, cfg.seed));
  echo_config(dir, cfg);
  write_json(dir / "pretrain.json", json{{"probe_accuracy", res.probe_accuracy}, {"epoch_loss", res.epoch_loss}});
  out << "pretrained backbone: train-split probe accuracy " << res.probe_accuracy << "%\n";
  return kOk;
}

int cmd_train_rob(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  const ModelWeights model = load_model(o.model_path, cfg);
  const fs::path dir = make_dir(o.out);
  const SyntheticDataset ds = generate_dataset(cfg.data);
  const TrainResult res = train_loop(model, ds.train, cfg.train, cfg.attack, cfg.num_tokens);

  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.seed = cfg.seed;
  ckpt.tensors.emplace_back(kRobTokensName, res.rob.tokens.detach());
  save_checkpoint(dir / "tokens.ckpt", ckpt);
  write_train_csv(dir / "train.csv", res.record);
  json summary{{"steps", res.record.size()}, {"num_tokens", cfg.num_tokens}};
  if (!res.record.empty()) {
    summary["final_loss"] = res.record.back().loss;
    summary["grad_count"] = res.record.back().grad_count;
  }
  if (res.record.size() >= 100) summary["trailing_cosine"] = trailing_cosine_summary(res.record, 100);
  write_json(dir / "summary.json", summary);
  echo_config(dir, cfg);
  out << "trained " << cfg.num_tokens << " tokens for " << res.record.size() << " steps\n";
  return kOk;
}

int cmd_attack(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  const ModelWeights model = load_model(o.model_path, cfg);
  const fs::path dir = make_dir(o.out);
  const AttackFamily family = parse_attack_family(o.attack);

  Tensor images;
  if (!o.images_dir.empty()) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(o.images_dir)) {
      if (e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no PNG files in '" + o.images_dir + "'");
    std::vector<AdversarialExample> loaded;
    for (const auto& f : files) {
      AdversarialExample e;
      e.image = read_png(f);
      loaded.push_back(std::move(e));
    }
    images = stack_images(loaded);
  } else {
    if (o.count < 1) throw ConfigError("--count must be positive");
    const SyntheticDataset ds = generate_dataset(cfg.data);
    images = ds.eval.range(0, std::min(o.count, ds.eval.size())).images;
  }
  if (images.dim(2) != model.config.image_size || images.dim(3) != model.config.image_size) {
    throw ContractError("images are " + to_string(images.shape()) + " but the model expects " +
                        std::to_string(model.config.image_size) + " pixels");
  }

  const auto adv = family == AttackFamily::Pgd ? pgd_feature_attack(model, images, cfg.attack)
                                               : fgsm_feature_attack(model, images, cfg.attack);
  const Index n = images.dim(0);
  const Index per = images.size() / n;
  Shape shape(images.shape().begin() + 1, images.shape().end());
  json per_image = json::array();
  std::vector<double> trace(adv.front().loss_trace.size(), 0.0);
  for (Index i = 0; i < n; ++i) {
    const auto& a = adv[static_cast<std::size_t>(i)];
    char name[32];
    std::snprintf(name, sizeof name, "%05lld", static_cast<long long>(i));
    write_png(dir / ("clean_" + std::string(name) + ".png"), Tensor(shape, images.value().segment(i * per, per)));
    write_png(dir / ("adv_" + std::string(name) + ".png"), a.image);
    const double linf = (a.image.value() - images.value().segment(i * per, per)).cwiseAbs().maxCoeff();
    per_image.push_back(json{{"index", i}, {"psnr_db", a.psnr_db}, {"psnr_ok", a.psnr_ok}, {"linf", linf}});
    for (std::size_t s = 0; s < trace.size(); ++s) trace[s] += a.loss_trace[s] / static_cast<double>(n);
  }
  write_trace_csv(dir / "trace.csv", trace);
  write_json(dir / "attack.json", json{{"family", to_string(family)}, {"config", cfg.attack}, {"images", per_image}});
  echo_config(dir, cfg);
  out << "wrote " << n << " " << to_string(family) << " adversaries\n";
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  const ModelWeights model = load_model(o.model_path, cfg);
  const fs::path dir = make_dir(o.out);
  AttackSpec attack{AttackFamily::Pgd, cfg.attack};
  if (o.eval == "generalization") {
    attack.family = AttackFamily::Fgsm;
  } else if (o.eval != "standard") {
    throw ConfigError("--eval expects standard or generalization, got '" + o.eval + "'");
  }
  std::optional<Tensor> rob;
  if (!o.tokens_path.empty()) rob = load_tokens(o.tokens_path, model);

  const SyntheticDataset ds = generate_dataset(cfg.data);
  const ProbeHead head =
      train_linear_probe(model, rob, ds.probe.images, ds.probe.labels, cfg.data.n_classes, cfg.probe);
  const EvalReport report = evaluate(model, rob, head, eval_split(ds, cfg), attack);
  write_json(dir / "report.json", json(report));
  echo_config(dir, cfg);
  out << "clean " << report.clean_accuracy << "% adv " << report.adv_accuracy << "% features "
      << report.feature_robustness << "\n";
  return kOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  const ModelWeights model = load_model(o.model_path, cfg);
  const fs::path dir = make_dir(o.out);
  const SyntheticDataset ds = generate_dataset(cfg.data);
  const AblationResult res = ablate_token_count(model, ds.train, cfg.train, cfg.attack, cfg.counts,
                                                  std::min<Index>(20, cfg.train.max_steps));
  write_json(dir / "ablation.json", json(res));
  for (const auto& leg : res.legs) write_train_csv(dir / ("curve_r" + std::to_string(leg.tokens) + ".csv"), leg.record);
  write_train_csv(dir / "curve_r0.csv", res.baseline.record);
  echo_config(dir, cfg);
  for (const auto& leg : res.legs) out << "R=" << leg.tokens << " final loss " << leg.final_loss << "\n";
  out << "R=0 final loss " << res.baseline.final_loss << "\n";
  return kOk;
}

int cmd_probe_activations(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  const ModelWeights model = load_model(o.model_path, cfg);
  const fs::path dir = make_dir(o.out);
  const Tensor rob = o.tokens_path.empty() ? Tensor::zeros({0, model.config.dim}) : load_tokens(o.tokens_path, model);
  const SyntheticDataset ds = generate_dataset(cfg.data);
  if (o.index < 0 || o.index >= ds.eval.size()) throw ConfigError("--index is outside the evaluation split");
  const ActivationReport report =
      massive_activation_report(model, rob, ds.eval.range(o.index, o.index + 1).images, cfg.attack);
  write_activation_csv(dir / "activations.csv", report);
  write_json(dir / "activations.json", json(report));
  echo_config(dir, cfg);
  out << "gap without tokens " << report.gap_without() << ", with tokens " << report.gap_with() << "\n";
  return kOk;
}

void add_common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "master seed");
  app->add_option("--threads", o.threads, "worker cap (falls back to ROBTOK_THREADS)");
  app->add_option("--num-tokens", o.num_tokens, "robustness token count");
  app->add_option("--eval-samples", o.eval_samples, "evaluation images (0 = whole split)");
  app->add_option("--counts", o.counts, "token counts for ablation, e.g. 1,10,20,50");
  // One flag per config field, e.g. --train.max_steps 200.
  const json defaults = RunConfig{};
  for (const auto& [section, body] : defaults.items()) {
    if (!body.is_object()) continue;
    for (const auto& [key, _] : body.items()) {
      const std::string name = section + "." + key;
      app->add_option_function<std::string>(
          "--" + name, [&o, name](const std::string& v) { o.overrides[name] = v; }, "override " + name)
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    }
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Robustness tokens for a frozen toy vision transformer"};
  app.require_subcommand(1);
  Options o;

  auto* pretrain = app.add_subcommand("pretrain", "train a backbone and save its checkpoint");
  add_common(pretrain, o);
  pretrain->add_option("--out", o.out, "checkpoint path")->required();

  auto* train = app.add_subcommand("train-rob", "train robustness tokens on a frozen backbone");
  add_common(train, o);
  train->add_option("--model", o.model_path, "backbone checkpoint")->required();
  train->add_option("--out", o.out, "output directory")->required();

  auto* attack = app.add_subcommand("attack", "craft adversarial images on the token-free backbone");
  add_common(attack, o);
  attack->add_option("--model", o.model_path, "backbone checkpoint")->required();
  attack->add_option("--out", o.out, "output directory")->required();
  attack->add_option("--attack", o.attack, "pgd or fgsm")->check(CLI::IsMember({"pgd", "fgsm"}));
  attack->add_option("--images", o.images_dir, "directory of PNG images (default: evaluation split)");
  attack->add_option("--count", o.count, "images taken from the evaluation split");

  auto* eval = app.add_subcommand("eval", "clean and adversarial evaluation");
  add_common(eval, o);
  eval->add_option("--model", o.model_path, "backbone checkpoint")->required();
  eval->add_option("--tokens", o.tokens_path, "token checkpoint (omit for the baseline)");
  eval->add_option("--out", o.out, "output directory")->required();
  eval->add_option("--eval", o.eval, "standard or generalization")
      ->check(CLI::IsMember({"standard", "generalization"}));

  auto* ablate = app.add_subcommand("ablate", "token-count ablation");
  add_common(ablate, o);
  ablate->add_option("--model", o.model_path, "backbone checkpoint")->required();
  ablate->add_option("--out", o.out, "output directory")->required();

  auto* probe = app.add_subcommand("probe-activations", "max-abs activations per layer");
  add_common(probe, o);
  probe->add_option("--model", o.model_path, "backbone checkpoint")->required();
  probe->add_option("--tokens", o.tokens_path, "token checkpoint (omit for none)");
  probe->add_option("--out", o.out, "output directory")->required();
  probe->add_option("--index", o.index, "evaluation image index");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*pretrain) return cmd_pretrain(o, out);
    if (*train) return cmd_train_rob(o, out);
    if (*attack) return cmd_attack(o, out);
    if (*eval) return cmd_eval(o, out);
    if (*ablate) return cmd_ablate(o, out);
    if (*probe) return cmd_probe_activations(o, out);
  } catch (const PretrainingFailed& e) {
    err << "error: " << e.what() << "\n";
    return kContract;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kContract;
  }
  return kUsage;
}

}  // namespace robtok::cli
