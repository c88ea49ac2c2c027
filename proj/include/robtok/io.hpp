#pragma once

#include "robtok/checkpoint.hpp"
#include "robtok/dataset.hpp"
#include "robtok/eval.hpp"
#include "robtok/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace robtok {

/// 8-bit RGB PNG from a [3, H, W] image in [0, 1]. Values are rounded to the
/// nearest level, so an image already on the 8-bit grid round-trips exactly.
void write_png(const std::filesystem::path& path, const Tensor& image);
/// [3, H, W] with values k / 255.
Tensor read_png(const std::filesystem::path& path);

/// Columns: step, loss, loss_inv, loss_adv, grad_count, wall_ms.
void write_train_csv(const std::filesystem::path& path, const TrainRecord& record);
/// Columns: step, loss. Step 0 is the value at the clean image.
void write_trace_csv(const std::filesystem::path& path, const std::vector<double>& trace);
/// Columns: layer, clean_without, adv_without, clean_with, adv_with.
void write_activation_csv(const std::filesystem::path& path, const ActivationReport& report);

/// Every image as NNNNN.png plus labels.csv (file, label).
void export_dataset(const std::filesystem::path& dir, const LabeledBatch& batch);

void write_json(const std::filesystem::path& path, const nlohmann::json& value);
nlohmann::json read_json(const std::filesystem::path& path);

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);
void to_json(nlohmann::json& j, const EvalReport& r);
void to_json(nlohmann::json& j, const PairedEval& p);
void to_json(nlohmann::json& j, const AblationResult& r);
void to_json(nlohmann::json& j, const ActivationReport& r);
void to_json(nlohmann::json& j, const CosineSummary& s);

}  // namespace robtok
