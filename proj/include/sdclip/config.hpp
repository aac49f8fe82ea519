#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "sdclip/encoders.hpp"
#include "sdclip/losses.hpp"
#include "sdclip/momentum.hpp"

namespace sdclip {

inline constexpr int kConfigVersion = 1;

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.1;
  std::size_t warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
};

struct CorpusConfig {
  std::size_t train_size = 10000;
  std::size_t eval_size = 1000;
  double misalignment = 0.2;
};

struct TrainConfig {
  std::uint64_t seed = 0;
  DistillVariant variant = DistillVariant::kEclipse;
  // Off = plain contrastive baseline: no teacher, no EMA, loss L_CLIP(T·Iᵀ).
  bool teacher_enabled = true;
  ViTConfig vit;
  TextConfig text;
  double lambda = 0.5;
  double ramp_start = 0.5;
  double ramp_end = 1.0;
  double tau_init = 0.07;
  double tau_min = 0.01;
  double tau_max = 1.0;
  EmaSettings ema;
  std::size_t epochs = 20;
  std::size_t batch_size = 128;
  OptimConfig optim;
  CorpusConfig corpus;
  // Save a checkpoint every k epochs (0 = only at the end).
  std::size_t checkpoint_every = 0;

  std::size_t steps_per_epoch() const { return corpus.train_size / batch_size; }
  std::size_t total_steps() const { return epochs * steps_per_epoch(); }
  LambdaSchedule lambda_schedule() const {
    return variant_lambda_schedule(variant, lambda, ramp_start, ramp_end);
  }
  bool uses_text_teacher() const { return teacher_enabled && variant_needs_text_teacher(variant); }

  // Throws ConfigError with the offending field.
  void validate() const;
};

nlohmann::ordered_json to_json(const TrainConfig& config);
// Strict: unknown keys, wrong types and version mismatches are rejected.
// Missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::filesystem::path& path);

}  // namespace sdclip
