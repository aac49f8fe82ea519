#include "sdclip/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "sdclip/rng.hpp"

namespace sdclip {

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("vit: image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("vit: width " + std::to_string(width) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (depth == 0 || proj_dim == 0 || channels == 0) {
    throw ConfigError("vit: depth, proj_dim and channels must be positive");
  }
  if (!(keep_rate > 0.0 && keep_rate <= 1.0)) {
    throw ConfigError("vit: keep_rate " + std::to_string(keep_rate) + " outside (0, 1]");
  }
  for (std::size_t layer : sparsify_layers) {
    if (layer < 1 || layer > depth) {
      throw ConfigError("vit: sparsify layer " + std::to_string(layer) + " outside [1, " +
                        std::to_string(depth) + "]");
    }
  }
}

void TextConfig::validate() const {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("text: width " + std::to_string(width) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (vocab_size == 0 || max_len == 0 || depth == 0 || proj_dim == 0) {
    throw ConfigError("text: vocab_size, max_len, depth and proj_dim must be positive");
  }
}

std::vector<std::size_t> default_sparsify_layers(std::size_t depth) {
  std::vector<std::size_t> layers;
  for (double numerator : {4.0, 7.0, 10.0}) {
    const auto layer = static_cast<std::size_t>(
        std::max(1.0, std::round(static_cast<double>(depth) * numerator / 12.0)));
    if (layers.empty() || layers.back() != layer) layers.push_back(std::min(layer, depth));
  }
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

std::size_t keep_count(std::size_t n, double keep_rate) {
  const double raw = std::ceil(keep_rate * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(raw, 0.0)), n > 0 ? 1 : 0, n);
}

std::vector<float> patchify(std::span<const float> image, std::size_t image_size,
                            std::size_t channels, std::size_t patch_size) {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("patchify: image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (image.size() != image_size * image_size * channels) {
    throw DimensionError("patchify: image has " + std::to_string(image.size()) +
                         " values, expected " +
                         std::to_string(image_size * image_size * channels));
  }
  const std::size_t grid = image_size / patch_size;
  const std::size_t row_len = patch_size * channels;
  std::vector<float> out(image.size());
  float* dst = out.data();
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      for (std::size_t py = 0; py < patch_size; ++py) {
        const std::size_t y = gy * patch_size + py;
        const float* src = image.data() + (y * image_size + gx * patch_size) * channels;
        dst = std::copy_n(src, row_len, dst);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<T> cls_attentiveness(std::span<const T> attention, std::size_t heads,
                                 std::size_t seq) {
  if (attention.size() != heads * seq * seq || seq == 0) {
    throw DimensionError("cls_attentiveness: attention size does not match heads×seq×seq");
  }
  std::vector<T> scores(seq - 1, T(0));
  for (std::size_t h = 0; h < heads; ++h) {
    const T* cls_row = attention.data() + h * seq * seq;
    for (std::size_t j = 1; j < seq; ++j) scores[j - 1] += cls_row[j];
  }
  const T inv = T(1) / static_cast<T>(heads);
  for (T& s : scores) s *= inv;
  return scores;
}

template <typename T>
std::vector<std::size_t> select_attentive(std::span<const T> scores, double keep_rate) {
  const std::size_t k = keep_count(scores.size(), keep_rate);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

template <typename T>
SparsifiedTokens<T> token_sparsify(const Tensor<T>& tokens, std::span<const T> scores,
                                   double keep_rate) {
  if (tokens.rows() != scores.size() + 1) {
    throw DimensionError("token_sparsify: " + std::to_string(scores.size()) +
                         " scores for " + std::to_string(tokens.rows()) + " tokens");
  }
  auto kept = select_attentive(scores, keep_rate);
  std::vector<std::size_t> rows{0};
  for (std::size_t k : kept) rows.push_back(k + 1);
  return {gather_rows(tokens, std::span<const std::size_t>(rows)), std::move(kept)};
}

namespace {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double stddev) {
  std::vector<T> data(shape_numel(shape));
  for (T& v : data) v = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Tensor<T> filled(Shape shape, T value) {
  std::vector<T> data(shape_numel(shape), value);
  return Tensor<T>(std::move(shape), std::move(data), true);
}

template <typename T>
Linear<T> make_linear(Rng& rng, std::size_t in, std::size_t out, double stddev) {
  return {random_tensor<T>(rng, {in, out}, stddev), filled<T>({1, out}, T(0))};
}

template <typename T>
TransformerBlock<T> make_block(Rng& rng, std::size_t width, std::size_t depth) {
  // Residual-branch output layers are scaled down with depth (GPT-2 style).
  const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(depth));
  TransformerBlock<T> b;
  b.ln1_gain = filled<T>({1, width}, T(1));
  b.ln1_bias = filled<T>({1, width}, T(0));
  b.qkv = make_linear<T>(rng, width, 3 * width, 0.02);
  b.attn_out = make_linear<T>(rng, width, width, residual_std);
  b.ln2_gain = filled<T>({1, width}, T(1));
  b.ln2_bias = filled<T>({1, width}, T(0));
  b.fc1 = make_linear<T>(rng, width, 4 * width, 0.02);
  b.fc2 = make_linear<T>(rng, 4 * width, width, residual_std);
  return b;
}

template <typename T>
void append_block_params(ParamList<T>& out, const TransformerBlock<T>& b, std::size_t i) {
  const std::string p = "blocks." + std::to_string(i) + ".";
  out.push_back({p + "ln1.gain", b.ln1_gain});
  out.push_back({p + "ln1.bias", b.ln1_bias});
  out.push_back({p + "qkv.weight", b.qkv.weight});
  out.push_back({p + "qkv.bias", b.qkv.bias});
  out.push_back({p + "attn_out.weight", b.attn_out.weight});
  out.push_back({p + "attn_out.bias", b.attn_out.bias});
  out.push_back({p + "ln2.gain", b.ln2_gain});
  out.push_back({p + "ln2.bias", b.ln2_bias});
  out.push_back({p + "fc1.weight", b.fc1.weight});
  out.push_back({p + "fc1.bias", b.fc1.bias});
  out.push_back({p + "fc2.weight", b.fc2.weight});
  out.push_back({p + "fc2.bias", b.fc2.bias});
}

template <typename T>
TransformerBlock<T> copy_block(const TransformerBlock<T>& b, bool rg) {
  TransformerBlock<T> c;
  c.ln1_gain = b.ln1_gain.clone(rg);
  c.ln1_bias = b.ln1_bias.clone(rg);
  c.qkv = {b.qkv.weight.clone(rg), b.qkv.bias.clone(rg)};
  c.attn_out = {b.attn_out.weight.clone(rg), b.attn_out.bias.clone(rg)};
  c.ln2_gain = b.ln2_gain.clone(rg);
  c.ln2_bias = b.ln2_bias.clone(rg);
  c.fc1 = {b.fc1.weight.clone(rg), b.fc1.bias.clone(rg)};
  c.fc2 = {b.fc2.weight.clone(rg), b.fc2.bias.clone(rg)};
  return c;
}

template <typename T>
AttentionResult<T> attention_sublayer(const TransformerBlock<T>& b, Tensor<T>& x,
                                      const AttentionShape& shape) {
  auto att = multi_head_attention(b.qkv(layer_norm(x, b.ln1_gain, b.ln1_bias)), shape);
  x = add(x, b.attn_out(att.out));
  return att;
}

template <typename T>
void mlp_sublayer(const TransformerBlock<T>& b, Tensor<T>& x) {
  x = add(x, b.fc2(gelu(b.fc1(layer_norm(x, b.ln2_gain, b.ln2_bias)))));
}

}  // namespace

template <typename T>
VisionTransformer<T>::VisionTransformer(ViTConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, {0x7669}));
  const std::size_t d = config_.width;
  patch_embed_ = make_linear<T>(rng, config_.patch_dim(), d,
                                1.0 / std::sqrt(static_cast<double>(config_.patch_dim())));
  cls_token_ = random_tensor<T>(rng, {1, d}, 0.02);
  pos_embed_ = random_tensor<T>(rng, {config_.num_patches() + 1, d}, 0.02);
  for (std::size_t i = 0; i < config_.depth; ++i) {
    blocks_.push_back(make_block<T>(rng, d, config_.depth));
  }
  ln_final_gain_ = filled<T>({1, d}, T(1));
  ln_final_bias_ = filled<T>({1, d}, T(0));
  head_ = random_tensor<T>(rng, {d, config_.proj_dim}, 1.0 / std::sqrt(static_cast<double>(d)));
}

template <typename T>
EncoderOutput<T> VisionTransformer<T>::forward(const Images& images, double keep_rate,
                                               bool sparsify) const {
  if (images.size != config_.image_size || images.channels != config_.channels) {
    throw ConfigError("vit: expected " + std::to_string(config_.image_size) + "px images with " +
                      std::to_string(config_.channels) + " channels");
  }
  if (!(keep_rate > 0.0 && keep_rate <= 1.0)) {
    throw ConfigError("vit: keep_rate " + std::to_string(keep_rate) + " outside (0, 1]");
  }
  const std::size_t B = images.count;
  const std::size_t n = config_.num_patches();
  const std::size_t pd = config_.patch_dim();
  const std::size_t H = config_.heads;

  std::vector<T> patches(B * n * pd);
  for (std::size_t b = 0; b < B; ++b) {
    auto p = patchify(images.image(b), config_.image_size, config_.channels, config_.patch_size);
    std::copy(p.begin(), p.end(), patches.begin() + static_cast<std::ptrdiff_t>(b * n * pd));
  }
  Tensor<T> x = patch_embed_(Tensor<T>({B * n, pd}, std::move(patches), false));

  // Interleave one [CLS] row ahead of each image's patch rows.
  std::vector<std::size_t> order;
  order.reserve(B * (n + 1));
  for (std::size_t b = 0; b < B; ++b) {
    order.push_back(0);
    for (std::size_t i = 0; i < n; ++i) order.push_back(1 + b * n + i);
  }
  x = gather_rows(concat_rows(cls_token_, x), std::span<const std::size_t>(order));
  x = add_tiled(x, pos_embed_);

  std::size_t L = n + 1;
  std::vector<std::vector<std::size_t>> patch_ids(B, std::vector<std::size_t>(n));
  for (auto& ids : patch_ids) std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::vector<SparsifyTrace> traces(B);

  for (std::size_t layer = 1; layer <= config_.depth; ++layer) {
    const auto& blk = blocks_[layer - 1];
    AttentionShape shape{B, L, H, false, {}};
    auto att = attention_sublayer(blk, x, shape);

    const bool prune = sparsify && std::find(config_.sparsify_layers.begin(),
                                             config_.sparsify_layers.end(),
                                             layer) != config_.sparsify_layers.end();
    if (prune) {
      const std::size_t k = keep_count(L - 1, keep_rate);
      std::vector<std::size_t> rows;
      rows.reserve(B * (k + 1));
      for (std::size_t b = 0; b < B; ++b) {
        std::span<const T> probs(att.probs->data() + b * H * L * L, H * L * L);
        const auto scores = cls_attentiveness<T>(probs, H, L);
        const auto kept = select_attentive<T>(scores, keep_rate);
        rows.push_back(b * L);
        std::vector<std::size_t> ids;
        ids.reserve(kept.size());
        for (std::size_t pos : kept) {
          rows.push_back(b * L + 1 + pos);
          ids.push_back(patch_ids[b][pos]);
        }
        patch_ids[b] = ids;
        traces[b].kept.push_back(std::move(ids));
      }
      x = gather_rows(x, std::span<const std::size_t>(rows));
      L = k + 1;
    }
    mlp_sublayer(blk, x);
  }

  std::vector<std::size_t> cls_rows(B);
  for (std::size_t b = 0; b < B; ++b) cls_rows[b] = b * L;
  Tensor<T> cls = gather_rows(x, std::span<const std::size_t>(cls_rows));
  cls = layer_norm(cls, ln_final_gain_, ln_final_bias_);
  Tensor<T> projections = matmul(cls, head_);
  return {l2_normalize(projections), std::move(traces), projections};
}

template <typename T>
ParamList<T> VisionTransformer<T>::parameters() const {
  ParamList<T> out;
  out.push_back({"patch_embed.weight", patch_embed_.weight});
  out.push_back({"patch_embed.bias", patch_embed_.bias});
  out.push_back({"cls_token", cls_token_});
  out.push_back({"pos_embed", pos_embed_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) append_block_params(out, blocks_[i], i);
  out.push_back({"ln_final.gain", ln_final_gain_});
  out.push_back({"ln_final.bias", ln_final_bias_});
  out.push_back({"head.weight", head_});
  return out;
}

template <typename T>
VisionTransformer<T> VisionTransformer<T>::copy(bool requires_grad) const {
  VisionTransformer c;
  c.config_ = config_;
  c.patch_embed_ = {patch_embed_.weight.clone(requires_grad), patch_embed_.bias.clone(requires_grad)};
  c.cls_token_ = cls_token_.clone(requires_grad);
  c.pos_embed_ = pos_embed_.clone(requires_grad);
  for (const auto& b : blocks_) c.blocks_.push_back(copy_block(b, requires_grad));
  c.ln_final_gain_ = ln_final_gain_.clone(requires_grad);
  c.ln_final_bias_ = ln_final_bias_.clone(requires_grad);
  c.head_ = head_.clone(requires_grad);
  return c;
}

template <typename T>
TextTransformer<T>::TextTransformer(TextConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, {0x7478}));
  const std::size_t d = config_.width;
  token_embed_ = random_tensor<T>(rng, {config_.vocab_size, d}, 0.02);
  pos_embed_ = random_tensor<T>(rng, {config_.max_len, d}, 0.01);
  for (std::size_t i = 0; i < config_.depth; ++i) {
    blocks_.push_back(make_block<T>(rng, d, config_.depth));
  }
  ln_final_gain_ = filled<T>({1, d}, T(1));
  ln_final_bias_ = filled<T>({1, d}, T(0));
  head_ = random_tensor<T>(rng, {d, config_.proj_dim}, 1.0 / std::sqrt(static_cast<double>(d)));
}

template <typename T>
Tensor<T> TextTransformer<T>::forward(const std::vector<std::vector<std::int32_t>>& rows) const {
  std::size_t L = 1;
  for (const auto& r : rows) {
    if (r.size() > config_.max_len) {
      throw ConfigError("text: sequence of " + std::to_string(r.size()) +
                        " tokens exceeds max_len " + std::to_string(config_.max_len));
    }
    L = std::max(L, r.size());
  }
  std::vector<std::int32_t> ids(rows.size() * L, kPadId);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b].begin(), rows[b].end(), ids.begin() + static_cast<std::ptrdiff_t>(b * L));
  }
  const std::size_t B = rows.size();
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(config_.vocab_size));
    }
  }

  std::vector<std::size_t> lengths(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t len = 0;
    for (std::size_t i = 0; i < L; ++i) {
      if (ids[b * L + i] != kPadId) len = i + 1;
    }
    lengths[b] = std::max<std::size_t>(len, 1);
  }

  Tensor<T> x = embedding_lookup(token_embed_, std::span<const std::int32_t>(ids));
  std::vector<std::size_t> positions(L);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  x = add_tiled(x, gather_rows(pos_embed_, std::span<const std::size_t>(positions)));

  AttentionShape shape{B, L, config_.heads, true, lengths};
  for (const auto& blk : blocks_) {
    attention_sublayer(blk, x, shape);
    mlp_sublayer(blk, x);
  }
  std::vector<std::size_t> last(B);
  for (std::size_t b = 0; b < B; ++b) last[b] = b * L + lengths[b] - 1;
  Tensor<T> pooled = gather_rows(x, std::span<const std::size_t>(last));
  pooled = layer_norm(pooled, ln_final_gain_, ln_final_bias_);
  return l2_normalize(matmul(pooled, head_));
}

template <typename T>
Tensor<T> TextTransformer<T>::forward(std::span<const std::int32_t> ids, std::size_t batch) const {
  if (batch == 0 || ids.size() % batch != 0) {
    throw DimensionError("text: " + std::to_string(ids.size()) + " ids do not form " +
                         std::to_string(batch) + " rows");
  }
  const std::size_t len = ids.size() / batch;
  std::vector<std::vector<std::int32_t>> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    rows[b].assign(ids.begin() + static_cast<std::ptrdiff_t>(b * len),
                   ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * len));
  }
  return forward(rows);
}

template <typename T>
ParamList<T> TextTransformer<T>::parameters() const {
  ParamList<T> out;
  out.push_back({"token_embed", token_embed_});
  out.push_back({"pos_embed", pos_embed_});
  for (std::size_t i = 0; i < blocks_.size(); ++i) append_block_params(out, blocks_[i], i);
  out.push_back({"ln_final.gain", ln_final_gain_});
  out.push_back({"ln_final.bias", ln_final_bias_});
  out.push_back({"head.weight", head_});
  return out;
}

template <typename T>
TextTransformer<T> TextTransformer<T>::copy(bool requires_grad) const {
  TextTransformer c;
  c.config_ = config_;
  c.token_embed_ = token_embed_.clone(requires_grad);
  c.pos_embed_ = pos_embed_.clone(requires_grad);
  for (const auto& b : blocks_) c.blocks_.push_back(copy_block(b, requires_grad));
  c.ln_final_gain_ = ln_final_gain_.clone(requires_grad);
  c.ln_final_bias_ = ln_final_bias_.clone(requires_grad);
  c.head_ = head_.clone(requires_grad);
  return c;
}

template std::vector<float> cls_attentiveness(std::span<const float>, std::size_t, std::size_t);
template std::vector<double> cls_attentiveness(std::span<const double>, std::size_t, std::size_t);
template std::vector<std::size_t> select_attentive(std::span<const float>, double);
template std::vector<std::size_t> select_attentive(std::span<const double>, double);
template SparsifiedTokens<float> token_sparsify(const Tensor<float>&, std::span<const float>, double);
template SparsifiedTokens<double> token_sparsify(const Tensor<double>&, std::span<const double>, double);

template class VisionTransformer<float>;
template class VisionTransformer<double>;
template class TextTransformer<float>;
template class TextTransformer<double>;

}  // namespace sdclip
