#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "sdclip/tensor.hpp"

// Differentiable primitives. Every function records its backward rule on the
// active tape when at least one input requires grad; otherwise it is a plain
// forward computation.
namespace sdclip {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kL2NormalizeEps = 1e-12;

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a·bᵀ without materializing the transpose.
template <typename T> Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
// x [R×C] + y [r×C] with y repeated down the rows; R must be a multiple of r.
template <typename T> Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& y);
template <typename T> Tensor<T> scale(const Tensor<T>& x, double factor);
// x / s for a one-element tensor s.
template <typename T> Tensor<T> div_scalar(const Tensor<T>& x, const Tensor<T>& s);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> gelu(const Tensor<T>& x);

template <typename T> Tensor<T> softmax_rows(const Tensor<T>& x);
template <typename T> Tensor<T> log_softmax_rows(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps = kLayerNormEps);
// Each row divided by (its Euclidean norm + eps).
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps = kL2NormalizeEps);

// Identity forward; contributes nothing in backward.
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& x);

template <typename T> Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);
// out.row(i) = x.row(indices[i]); backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> indices);
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int32_t> ids);
// Main diagonal of a square matrix as a 1×N row.
template <typename T> Tensor<T> diagonal(const Tensor<T>& x);

struct AttentionShape {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  bool causal = false;
  // Optional per-sequence count of valid key positions; keys at or past it
  // are masked out. Empty means every position is valid.
  std::vector<std::size_t> valid_lengths;
};

template <typename T>
struct AttentionResult {
  Tensor<T> out;  // [batch·seq × width]
  // Softmax-normalized attention, laid out [batch][heads][seq][seq].
  std::shared_ptr<const std::vector<T>> probs;
};

/// Scaled dot-product multi-head self-attention over packed sequences.
/// qkv is [batch·seq × 3·width] holding Q | K | V column blocks.
template <typename T>
AttentionResult<T> multi_head_attention(const Tensor<T>& qkv, const AttentionShape& shape);

namespace testing {
// Mutation hook for sensitivity tests of the gradient checker: when set, the
// softmax_rows backward rule is deliberately wrong.
void set_broken_softmax_backward(bool broken);
bool broken_softmax_backward();

// Lets a finite-difference check hold stop-gradient outputs constant. kRecord
// stores the output of every stop_gradient call on this thread; kReplay hands
// the stored values back in call order, whatever the current input.
enum class StopGradientFreeze { kOff, kRecord, kReplay };
void set_stop_gradient_freeze(StopGradientFreeze mode);
StopGradientFreeze stop_gradient_freeze();
}  // namespace testing

}  // namespace sdclip
