#include "robtok/io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace robtok {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << std::setprecision(17);
  return out;
}

void finish(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

}  // namespace

void write_png(const fs::path& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_png expects [3, H, W], got " + to_string(image.shape()));
  const Index h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> pixels(static_cast<std::size_t>(h * w * 3));
  const Vector& v = image.value();
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < h * w; ++i) {
      const double level = std::round(std::clamp(v[c * h * w + i], 0.0, 1.0) * 255.0);
      pixels[static_cast<std::size_t>(i * 3 + c)] = static_cast<unsigned char>(level);
    }
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(w);
  png.height = static_cast<png_uint_32>(h);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path.string() + "': " + png.message);
  }
}

Tensor read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read PNG '" + path.string() + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> pixels(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&png);
    throw IoError("cannot decode PNG '" + path.string() + "': " + png.message);
  }
  const Index h = png.height, w = png.width;
  Vector v(3 * h * w);
  for (Index c = 0; c < 3; ++c) {
    for (Index i = 0; i < h * w; ++i) v[c * h * w + i] = pixels[static_cast<std::size_t>(i * 3 + c)] / 255.0;
  }
  return Tensor({3, h, w}, std::move(v));
}

void write_train_csv(const fs::path& path, const TrainRecord& record) {
  auto out = open_out(path);
  out << "step,loss,loss_inv,loss_adv,grad_count,wall_ms\n";
  for (const auto& r : record) {
    out << r.step << ',' << r.loss << ',' << r.loss_inv << ',' << r.loss_adv << ',' << r.grad_count << ',' << r.wall_ms
        << '\n';
  }
  finish(out, path);
}

void write_trace_csv(const fs::path& path, const std::vector<double>& trace) {
  auto out = open_out(path);
  out << "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i) out << i << ',' << trace[i] << '\n';
  finish(out, path);
}

void write_activation_csv(const fs::path& path, const ActivationReport& report) {
  auto out = open_out(path);
  out << "layer,clean_without,adv_without,clean_with,adv_with\n";
  for (std::size_t i = 0; i < report.layers(); ++i) {
    out << i << ',' << report.clean_without[i] << ',' << report.adv_without[i] << ',' << report.clean_with[i] << ','
        << report.adv_with[i] << '\n';
  }
  finish(out, path);
}

void export_dataset(const fs::path& dir, const LabeledBatch& batch) {
  auto labels = open_out(dir / "labels.csv");
  labels << "file,label\n";
  const Index per = batch.images.size() / std::max<Index>(batch.size(), 1);
  Shape shape(batch.images.shape().begin() + 1, batch.images.shape().end());
  for (Index i = 0; i < batch.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05lld.png", static_cast<long long>(i));
    write_png(dir / name, Tensor(shape, batch.images.value().segment(i * per, per)));
    labels << name << ',' << batch.labels[static_cast<std::size_t>(i)] << '\n';
  }
  finish(labels, dir / "labels.csv");
}

void write_json(const fs::path& path, const json& value) {
  auto out = open_out(path);
  out << value.dump(2) << '\n';
  finish(out, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void to_json(json& j, const AttackConfig& c) {
  j = json{{"steps", c.steps},
           {"eps_inf", c.eps_inf},
           {"step_size", c.step()},
           {"quantize", c.quantize},
           {"min_psnr_db", c.min_psnr_db},
           {"mse_weight", c.mse_weight},
           {"psnr_projection", c.psnr_projection},
           {"start_jitter", c.start_jitter},
           {"seed", c.seed}};
}

void from_json(const json& j, AttackConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.eps_inf = j.value("eps_inf", c.eps_inf);
  if (j.contains("step_size") && !j["step_size"].is_null()) c.step_size = j["step_size"].get<double>();
  c.quantize = j.value("quantize", c.quantize);
  c.min_psnr_db = j.value("min_psnr_db", c.min_psnr_db);
  c.mse_weight = j.value("mse_weight", c.mse_weight);
  c.psnr_projection = j.value("psnr_projection", c.psnr_projection);
  c.start_jitter = j.value("start_jitter", c.start_jitter);
  c.seed = j.value("seed", c.seed);
}

void to_json(json& j, const EvalReport& r) {
  j = json{{"clean_accuracy", r.clean_accuracy},
           {"adv_accuracy", r.adv_accuracy},
           {"feature_robustness", r.feature_robustness},
           {"n_samples", r.n_samples},
           {"tokens_used", r.tokens_used}};
  if (r.attack) {
    j["attack"] = json{{"family", to_string(r.attack->family)}, {"config", r.attack->config}};
  } else {
    j["attack"] = nullptr;
  }
}

void to_json(json& j, const PairedEval& p) { j = json{{"baseline", p.baseline}, {"robust", p.robust}}; }

namespace {

json leg_json(const AblationLeg& leg) {
  json curve = json::array();
  for (const auto& r : leg.record) curve.push_back(r.loss);
  return json{{"tokens", leg.tokens}, {"final_loss", leg.final_loss}, {"curve", curve}};
}

}  // namespace

void to_json(json& j, const AblationResult& r) {
  json legs = json::array();
  for (const auto& leg : r.legs) legs.push_back(leg_json(leg));
  j = json{{"final_window", r.final_window}, {"legs", legs}, {"baseline", leg_json(r.baseline)}};
}

void to_json(json& j, const ActivationReport& r) {
  j = json{{"clean_without", r.clean_without},
           {"adv_without", r.adv_without},
           {"clean_with", r.clean_with},
           {"adv_with", r.adv_with},
           {"gap_without", r.gap_without()},
           {"gap_with", r.gap_with()}};
}

void to_json(json& j, const CosineSummary& s) { j = json{{"mean", s.mean}, {"stddev", s.stddev}}; }

}  // namespace robtok
