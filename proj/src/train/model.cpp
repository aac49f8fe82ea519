#include "sdclip/model.hpp"

#include <cmath>
#include <numbers>

#include "sdclip/rng.hpp"

namespace sdclip {

namespace {
bool decays(const std::string& name) {
  return name.size() >= 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

ParamList<float> prefixed(const ParamList<float>& params, const std::string& prefix) {
  ParamList<float> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({prefix + p.name, p.tensor});
  return out;
}
}  // namespace

AdamW::AdamW(const ParamList<float>& params) {
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.size(), 0.0f);
    v_.emplace_back(p.tensor.size(), 0.0f);
  }
}

void AdamW::step(const ParamList<float>& params, const OptimConfig& config, double lr) {
  if (params.size() != m_.size()) {
    throw ContractError("AdamW: parameter list changed size");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(config.beta1);
  const auto b2 = static_cast<float>(config.beta2);
  const auto step_size = static_cast<float>(lr / bc1);
  const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const auto eps = static_cast<float>(config.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> t = params[i].tensor;
    if (!t.has_grad()) continue;
    auto w = t.mutable_data();
    auto g = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const float decay = decays(params[i].name) ? static_cast<float>(1.0 - lr * config.weight_decay) : 1.0f;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0f - b1) * g[j];
      v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
      w[j] = w[j] * decay - step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

double learning_rate_at(std::size_t step, std::size_t total_steps, const OptimConfig& config) {
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  if (total_steps <= config.warmup_steps) return config.lr;
  const double progress = static_cast<double>(step - config.warmup_steps) /
                          static_cast<double>(total_steps - config.warmup_steps);
  return 0.5 * config.lr * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

ParamList<float> ModelState::trainable() const {
  ParamList<float> out = prefixed(text.parameters(), "text/");
  for (auto& p : prefixed(image.parameters(), "image/")) out.push_back(std::move(p));
  out.push_back({"log_tau", log_tau});
  return out;
}

ParamList<float> ModelState::image_teacher_params() const {
  return image_teacher ? prefixed(image_teacher->parameters(), "image_teacher/")
                       : ParamList<float>{};
}

ParamList<float> ModelState::text_teacher_params() const {
  return text_teacher ? prefixed(text_teacher->parameters(), "text_teacher/") : ParamList<float>{};
}

float ModelState::tau() const { return std::exp(log_tau.item()); }

ModelState init_model(const TrainConfig& config) {
  config.validate();
  ModelState state{
      TextTransformer<float>(config.text, derive_seed(config.seed, {1})),
      VisionTransformer<float>(config.vit, derive_seed(config.seed, {2})),
      std::nullopt,
      std::nullopt,
      Tensor<float>::scalar(static_cast<float>(std::log(config.tau_init)), true),
      EmbeddingCenter(config.vit.proj_dim),
      AdamW(),
      0,
  };
  if (config.teacher_enabled) state.image_teacher = state.image.copy(false);
  if (config.uses_text_teacher()) state.text_teacher = state.text.copy(false);
  state.optimizer = AdamW(state.trainable());
  return state;
}

}  // namespace sdclip
