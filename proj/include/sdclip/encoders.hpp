#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sdclip/ops.hpp"
#include "sdclip/tensor.hpp"

namespace sdclip {

/// Square RGB-like images packed as count × size × size × channels (HWC).
struct Images {
  std::size_t count = 0;
  std::size_t size = 0;
  std::size_t channels = 3;
  std::vector<float> pixels;

  std::size_t pixels_per_image() const { return size * size * channels; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(pixels).subspan(i * pixels_per_image(), pixels_per_image());
  }
};

struct ViTConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t depth = 6;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t proj_dim = 64;
  double keep_rate = 0.7;
  // 1-based layer indices after whose attention the token set is pruned.
  std::vector<std::size_t> sparsify_layers = {2, 4, 5};

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  void validate() const;
};

struct TextConfig {
  std::size_t vocab_size = 64;
  std::size_t max_len = 16;
  std::size_t depth = 4;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t proj_dim = 64;

  void validate() const;
};

// Layers at depth fractions 4/12, 7/12, 10/12 (rounded, at least 1, deduplicated);
// yields {4, 7, 10} at depth 12 and {2, 4, 5} at depth 6.
std::vector<std::size_t> default_sparsify_layers(std::size_t depth);

// ⌈κ·n⌉ with a small guard against representation error in κ·n.
std::size_t keep_count(std::size_t n, double keep_rate);

/// Original patch-grid indices (0-based, [CLS] excluded) surviving each
/// sparsify layer, in layer order. [CLS] always survives.
struct SparsifyTrace {
  std::vector<std::vector<std::size_t>> kept;
};

/// Raster-order, non-overlapping patches of one image, each flattened as
/// (row-in-patch, col-in-patch, channel): [n_patches × patch²·C] values.
std::vector<float> patchify(std::span<const float> image, std::size_t image_size,
                            std::size_t channels, std::size_t patch_size);

/// Head-averaged attention from [CLS] (query row 0) to each patch token.
/// `attention` is heads × seq × seq with seq = n + 1; returns n scores.
template <typename T>
std::vector<T> cls_attentiveness(std::span<const T> attention, std::size_t heads,
                                 std::size_t seq);

/// Positions (0-based among the n patch tokens) of the ⌈κ·n⌉ highest scores,
/// returned in ascending order. Ties go to the lower index.
template <typename T>
std::vector<std::size_t> select_attentive(std::span<const T> scores, double keep_rate);

template <typename T>
struct SparsifiedTokens {
  Tensor<T> tokens;                  // [(k+1) × d], [CLS] first
  std::vector<std::size_t> kept;     // patch positions, ascending
};

/// Keeps [CLS] (row 0) plus the most attentive patch rows; the dropped rows
/// are physically removed.
template <typename T>
SparsifiedTokens<T> token_sparsify(const Tensor<T>& tokens, std::span<const T> scores,
                                   double keep_rate);

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in × out]
  Tensor<T> bias;    // [1 × out]
  Tensor<T> operator()(const Tensor<T>& x) const { return add_tiled(matmul(x, weight), bias); }
};

template <typename T>
struct TransformerBlock {
  Tensor<T> ln1_gain, ln1_bias;
  Linear<T> qkv, attn_out;
  Tensor<T> ln2_gain, ln2_bias;
  Linear<T> fc1, fc2;
};

template <typename T>
struct EncoderOutput {
  Tensor<T> embeddings;  // [batch × proj_dim], unit rows
  std::vector<SparsifyTrace> traces;
  Tensor<T> projections;  // the same rows before l2 normalization
};

/// Pre-norm vision transformer whose token set is pruned by [CLS]
/// attentiveness at the configured layers.
template <typename T>
class VisionTransformer {
 public:
  VisionTransformer(ViTConfig config, std::uint64_t seed);

  EncoderOutput<T> forward(const Images& images) const {
    return forward(images, config_.keep_rate);
  }
  EncoderOutput<T> forward(const Images& images, double keep_rate, bool sparsify = true) const;

  ParamList<T> parameters() const;
  // Independent copy of every weight; the copy carries no gradient state
  // unless requires_grad is set.
  VisionTransformer copy(bool requires_grad) const;
  const ViTConfig& config() const { return config_; }

 private:
  VisionTransformer() = default;

  ViTConfig config_;
  Linear<T> patch_embed_;
  Tensor<T> cls_token_;
  Tensor<T> pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
  Tensor<T> ln_final_gain_, ln_final_bias_;
  Tensor<T> head_;  // [width × proj_dim]
};

/// Causal transformer over token ids; the representation is the state at the
/// final non-pad position.
template <typename T>
class TextTransformer {
 public:
  static constexpr std::int32_t kPadId = 0;

  TextTransformer(TextConfig config, std::uint64_t seed);

  // Rows may be ragged (each ≤ max_len); they are right-padded with kPadId.
  Tensor<T> forward(const std::vector<std::vector<std::int32_t>>& rows) const;
  // Row-major [batch × max_len] ids.
  Tensor<T> forward(std::span<const std::int32_t> ids, std::size_t batch) const;

  ParamList<T> parameters() const;
  TextTransformer copy(bool requires_grad) const;
  const TextConfig& config() const { return config_; }

 private:
  TextTransformer() = default;

  TextConfig config_;
  Tensor<T> token_embed_;
  Tensor<T> pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
  Tensor<T> ln_final_gain_, ln_final_bias_;
  Tensor<T> head_;
};

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;
extern template class TextTransformer<float>;
extern template class TextTransformer<double>;

}  // namespace sdclip
