#include "robtok/run_config.hpp"

#include "robtok/io.hpp"

#include <set>
#include <string>

namespace robtok {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::string& section, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

void RunConfig::resolve() {
  data.seed = seed;
  pretrain.seed = seed;
  train.seed = seed;
  attack.seed = seed;
  vit.image_size = data.image_size;
  vit.num_classes = data.n_classes;
  if (threads < 1) throw ConfigError("threads must be at least 1");
  if (num_tokens < 0) throw ConfigError("num_tokens must be non-negative");
  if (eval_samples < 0) throw ConfigError("eval_samples must be non-negative");
  data.validate();
  vit.validate();
  train.validate();
  attack.validate();
}

void to_json(json& j, const RunConfig& c) {
  j = json{{"seed", c.seed},
           {"threads", c.threads},
           {"num_tokens", c.num_tokens},
           {"counts", c.counts},
           {"eval_samples", c.eval_samples}};
  j["data"] = json{{"n_images", c.data.n_images},
                   {"image_size", c.data.image_size},
                   {"n_classes", c.data.n_classes},
                   {"train_fraction", c.data.train_fraction},
                   {"probe_fraction", c.data.probe_fraction},
                   {"pixel_noise", c.data.pixel_noise},
                   {"background_gradient", c.data.background_gradient},
                   {"texture_amplitude", c.data.texture_amplitude},
                   {"texture_period", c.data.texture_period}};
  j["vit"] = json{{"patch_size", c.vit.patch_size},   {"channels", c.vit.channels},
                  {"dim", c.vit.dim},                 {"depth", c.vit.depth},
                  {"heads", c.vit.heads},             {"mlp_ratio", c.vit.mlp_ratio},
                  {"num_registers", c.vit.num_registers}, {"ln_eps", c.vit.ln_eps},
                  {"pixel_mean", c.vit.pixel_mean},   {"pixel_std", c.vit.pixel_std}};
  j["pretrain"] = json{{"epochs", c.pretrain.epochs},
                       {"learning_rate", c.pretrain.learning_rate},
                       {"batch_size", c.pretrain.batch_size},
                       {"min_probe_accuracy", c.pretrain.min_probe_accuracy},
                       {"corpus_size", c.pretrain.corpus_size}};
  j["train"] = json{{"learning_rate", c.train.learning_rate}, {"beta1", c.train.beta1},
                    {"beta2", c.train.beta2},                 {"adam_eps", c.train.adam_eps},
                    {"batch_size", c.train.batch_size},       {"max_steps", c.train.max_steps},
                    {"dataset_size", c.train.dataset_size},   {"lambda_adv", c.train.lambda_adv},
                    {"psnr_retries", c.train.psnr_retries},   {"record_wall_time", c.train.record_wall_time}};
  json attack = c.attack;
  attack.erase("seed");
  j["attack"] = attack;
  j["probe"] = json{{"max_iterations", c.probe.max_iterations}, {"tolerance", c.probe.tolerance}};
}

void from_json(const json& j, RunConfig& c) {
  reject_unknown(j, "config",
                 {"seed", "threads", "num_tokens", "counts", "eval_samples", "data", "vit", "pretrain", "train",
                  "attack", "probe"});
  read(j, "seed", c.seed);
  read(j, "threads", c.threads);
  read(j, "num_tokens", c.num_tokens);
  read(j, "counts", c.counts);
  read(j, "eval_samples", c.eval_samples);
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, "data",
                   {"n_images", "image_size", "n_classes", "train_fraction", "probe_fraction", "pixel_noise",
                    "background_gradient", "texture_amplitude", "texture_period"});
    read(d, "n_images", c.data.n_images);
    read(d, "image_size", c.data.image_size);
    read(d, "n_classes", c.data.n_classes);
    read(d, "train_fraction", c.data.train_fraction);
    read(d, "probe_fraction", c.data.probe_fraction);
    read(d, "pixel_noise", c.data.pixel_noise);
    read(d, "background_gradient", c.data.background_gradient);
    read(d, "texture_amplitude", c.data.texture_amplitude);
    read(d, "texture_period", c.data.texture_period);
  }
  if (j.contains("vit")) {
    const json& v = j["vit"];
    reject_unknown(v, "vit",
                   {"patch_size", "channels", "dim", "depth", "heads", "mlp_ratio", "num_registers", "ln_eps",
                    "pixel_mean", "pixel_std"});
    read(v, "patch_size", c.vit.patch_size);
    read(v, "channels", c.vit.channels);
    read(v, "dim", c.vit.dim);
    read(v, "depth", c.vit.depth);
    read(v, "heads", c.vit.heads);
    read(v, "mlp_ratio", c.vit.mlp_ratio);
    read(v, "num_registers", c.vit.num_registers);
    read(v, "ln_eps", c.vit.ln_eps);
    read(v, "pixel_mean", c.vit.pixel_mean);
    read(v, "pixel_std", c.vit.pixel_std);
  }
  if (j.contains("pretrain")) {
    const json& p = j["pretrain"];
    reject_unknown(p, "pretrain", {"epochs", "learning_rate", "batch_size", "min_probe_accuracy", "corpus_size"});
    read(p, "epochs", c.pretrain.epochs);
    read(p, "learning_rate", c.pretrain.learning_rate);
    read(p, "batch_size", c.pretrain.batch_size);
    read(p, "min_probe_accuracy", c.pretrain.min_probe_accuracy);
    read(p, "corpus_size", c.pretrain.corpus_size);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, "train",
                   {"learning_rate", "beta1", "beta2", "adam_eps", "batch_size", "max_steps", "dataset_size",
                    "lambda_adv", "psnr_retries", "record_wall_time"});
    read(t, "learning_rate", c.train.learning_rate);
    read(t, "beta1", c.train.beta1);
    read(t, "beta2", c.train.beta2);
    read(t, "adam_eps", c.train.adam_eps);
    read(t, "batch_size", c.train.batch_size);
    read(t, "max_steps", c.train.max_steps);
    read(t, "dataset_size", c.train.dataset_size);
    read(t, "lambda_adv", c.train.lambda_adv);
    read(t, "psnr_retries", c.train.psnr_retries);
    read(t, "record_wall_time", c.train.record_wall_time);
  }
  if (j.contains("attack")) {
    const json& a = j["attack"];
    reject_unknown(a, "attack",
                   {"steps", "eps_inf", "step_size", "quantize", "min_psnr_db", "mse_weight", "psnr_projection",
                    "start_jitter"});
    try {
      from_json(a, c.attack);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad attack config: ") + e.what());
    }
  }
  if (j.contains("probe")) {
    const json& p = j["probe"];
    reject_unknown(p, "probe", {"max_iterations", "tolerance"});
    read(p, "max_iterations", c.probe.max_iterations);
    read(p, "tolerance", c.probe.tolerance);
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c;
  from_json(read_json(path), c);
  return c;
}

}  // namespace robtok
