#include "sdclip/momentum.hpp"

#include <algorithm>

#include "sdclip/ops.hpp"

namespace sdclip {

template <typename T>
void ema_update(const ParamList<T>& teacher, const ParamList<T>& online, double momentum) {
  if (teacher.size() != online.size()) {
    throw ContractError("ema_update: teacher has " + std::to_string(teacher.size()) +
                        " tensors, online has " + std::to_string(online.size()));
  }
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].name != online[i].name ||
        teacher[i].tensor.shape() != online[i].tensor.shape()) {
      throw ContractError("ema_update: teacher tensor '" + teacher[i].name + "' " +
                          shape_str(teacher[i].tensor.shape()) + " does not mirror '" +
                          online[i].name + "' " + shape_str(online[i].tensor.shape()));
    }
  }
  const T m = static_cast<T>(momentum);
  const T one_minus = static_cast<T>(1.0 - momentum);
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    Tensor<T> dst = teacher[i].tensor;
    auto out = dst.mutable_data();
    auto src = online[i].tensor.data();
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = m * out[j] + one_minus * src[j];
  }
}

void EmbeddingCenter::update(const Tensor<float>& embeddings, double center_momentum) {
  const std::size_t rows = embeddings.rows(), cols = embeddings.cols();
  if (cols != values_.size()) {
    throw DimensionError("center_update: embedding width " + std::to_string(cols) +
                         " vs center width " + std::to_string(values_.size()));
  }
  if (rows == 0) return;
  std::vector<double> batch_mean(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) batch_mean[c] += embeddings.at(r, c);
  const double rho = center_momentum;
  for (std::size_t c = 0; c < cols; ++c) {
    values_[c] = static_cast<float>(rho * values_[c] +
                                    (1.0 - rho) * (batch_mean[c] / static_cast<double>(rows)));
  }
}

bool EmbeddingCenter::is_zero() const {
  return std::all_of(values_.begin(), values_.end(), [](float v) { return v == 0.0f; });
}

Tensor<float> EmbeddingCenter::apply(const Tensor<float>& embeddings) const {
  if (embeddings.cols() != values_.size()) {
    throw DimensionError("apply_center: embedding width " + std::to_string(embeddings.cols()) +
                         " vs center width " + std::to_string(values_.size()));
  }
  NoGradScope<float> no_grad;
  if (is_zero()) return l2_normalize(embeddings);
  const std::size_t rows = embeddings.rows(), cols = embeddings.cols();
  std::vector<float> shifted(embeddings.data().begin(), embeddings.data().end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) shifted[r * cols + c] -= values_[c];
  return l2_normalize(Tensor<float>(embeddings.shape(), std::move(shifted), false));
}

template void ema_update(const ParamList<float>&, const ParamList<float>&, double);
template void ema_update(const ParamList<double>&, const ParamList<double>&, double);

}  // namespace sdclip
