#pragma once

#include <optional>
#include <vector>

#include "sdclip/config.hpp"
#include "sdclip/encoders.hpp"
#include "sdclip/momentum.hpp"

namespace sdclip {

/// Decoupled-weight-decay Adam. Moments are kept per parameter, matched by
/// position in the parameter list.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const ParamList<float>& params);

  // Applies one update with learning rate `lr` using the current gradients.
  void step(const ParamList<float>& params, const OptimConfig& config, double lr);

  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::size_t t_ = 0;
};

// Linear warmup to base lr, then cosine decay to zero at `total_steps`.
double learning_rate_at(std::size_t step, std::size_t total_steps, const OptimConfig& config);

/// Everything a training run mutates: encoders, teachers, temperature, EMA
/// center, optimizer moments and the global step counter.
struct ModelState {
  TextTransformer<float> text;
  VisionTransformer<float> image;
  std::optional<VisionTransformer<float>> image_teacher;
  std::optional<TextTransformer<float>> text_teacher;
  Tensor<float> log_tau;
  EmbeddingCenter center;
  AdamW optimizer;
  std::size_t step = 0;

  // Parameters updated by the optimizer, with "text/", "image/" prefixes.
  ParamList<float> trainable() const;
  ParamList<float> image_teacher_params() const;
  ParamList<float> text_teacher_params() const;
  float tau() const;
};

/// Fresh weights from config.seed; teachers start as exact copies of the
/// online encoders.
ModelState init_model(const TrainConfig& config);

}  // namespace sdclip
