#pragma once

#include <vector>

#include "sdclip/tensor.hpp"

namespace sdclip {

struct EmaSettings {
  double momentum = 0.994;
  bool centering = true;
  double center_momentum = 0.9;
  bool text_ema = false;
};

/// θ̄ ← m·θ̄ + (1−m)·θ for each tensor pair, matched by position. Names and
/// shapes must mirror exactly. Never touches gradient state.
template <typename T>
void ema_update(const ParamList<T>& teacher, const ParamList<T>& online, double momentum);

/// Running mean of the teacher's projected image embeddings.
class EmbeddingCenter {
 public:
  EmbeddingCenter() = default;
  explicit EmbeddingCenter(std::size_t dim) : values_(dim, 0.0f) {}

  // c ← ρ·c + (1−ρ)·mean_rows(projections), on pre-normalization projections.
  void update(const Tensor<float>& projections, double center_momentum);

  /// l2_normalize(projections − c), row-wise. A zero center skips the
  /// subtraction, so the result equals the encoder's own normalized output.
  Tensor<float> apply(const Tensor<float>& projections) const;

  bool is_zero() const;
  const std::vector<float>& values() const { return values_; }
  std::vector<float>& values() { return values_; }

 private:
  std::vector<float> values_;
};

}  // namespace sdclip
