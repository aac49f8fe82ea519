#include <doctest.h>

#include <cmath>

#include "sdclip/encoders.hpp"
#include "sdclip/rng.hpp"

using namespace sdclip;

namespace {
Images random_images(std::size_t count, std::size_t size, std::uint64_t seed) {
  Images im;
  im.count = count;
  im.size = size;
  im.channels = 3;
  im.pixels.resize(count * size * size * 3);
  Rng rng(seed);
  for (auto& p : im.pixels) p = static_cast<float>(rng.uniform());
  return im;
}

ViTConfig small_vit() {
  ViTConfig c;
  c.image_size = 32;
  c.patch_size = 4;  // 64 patches
  c.depth = 6;
  c.width = 32;
  c.heads = 2;
  c.proj_dim = 16;
  c.keep_rate = 0.7;
  c.sparsify_layers = {2, 4, 5};
  return c;
}

TextConfig small_text() {
  TextConfig c;
  c.vocab_size = 40;
  c.max_len = 12;
  c.depth = 2;
  c.width = 32;
  c.heads = 2;
  c.proj_dim = 16;
  return c;
}

double row_norm(const Tensor<float>& t, std::size_t r) {
  double s = 0;
  for (std::size_t c = 0; c < t.cols(); ++c) s += double(t.at(r, c)) * t.at(r, c);
  return std::sqrt(s);
}
}  // namespace

TEST_CASE("patchify shapes and symmetry") {
  std::vector<float> img(64 * 64 * 3, 0.25f);
  const auto tokens = patchify(img, 64, 3, 8);
  CHECK(tokens.size() == 64 * 192);
  for (std::size_t i = 0; i < tokens.size(); ++i) CHECK(tokens[i] == tokens[i % 192]);
  std::vector<float> gray(16 * 16, 0.0f);
  CHECK(patchify(gray, 16, 1, 16).size() == 256);
  CHECK_THROWS_AS(patchify(gray, 16, 1, 5), ConfigError);
}

TEST_CASE("patchify keeps each patch contiguous in row-major order") {
  std::vector<float> img(4 * 4);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i);
  const auto t = patchify(img, 4, 1, 2);
  const std::vector<float> first{0, 1, 4, 5}, second{2, 3, 6, 7};
  CHECK(std::vector<float>(t.begin(), t.begin() + 4) == first);
  CHECK(std::vector<float>(t.begin() + 4, t.begin() + 8) == second);
}

TEST_CASE("cls_attentiveness examples") {
  // One head, seq = 4 ([CLS] + 3), uniform rows.
  const std::vector<double> uniform(16, 0.25);
  const auto s = cls_attentiveness<double>(uniform, 1, 4);
  REQUIRE(s.size() == 3);
  for (double v : s) CHECK(v == doctest::Approx(0.25));

  std::vector<double> two(2 * 16, 0.0);
  two[0 * 16 + 1] = 1.0;
  two[1 * 16 + 2] = 1.0;
  const auto avg = cls_attentiveness<double>(two, 2, 4);
  CHECK(avg[0] == doctest::Approx(0.5));
  CHECK(avg[1] == doctest::Approx(0.5));
  CHECK(avg[2] == 0.0);

  const std::vector<double> single{0.3, 0.7, 0.5, 0.5};
  const auto one = cls_attentiveness<double>(single, 1, 2);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == doctest::Approx(1.0 - 0.3));
}

TEST_CASE("keep_count and select_attentive") {
  CHECK(keep_count(196, 0.7) == 138);
  CHECK(keep_count(64, 0.7) == 45);
  CHECK(keep_count(45, 0.7) == 32);
  CHECK(keep_count(32, 0.7) == 23);
  CHECK(keep_count(10, 1.0) == 10);
  const std::vector<double> scores{0.5, 0.3, 0.2};
  CHECK(select_attentive<double>(scores, 0.6) == std::vector<std::size_t>{0, 1});
  const std::vector<double> tied{0.2, 0.4, 0.4, 0.1};
  CHECK(select_attentive<double>(tied, 0.25) == std::vector<std::size_t>{1});
}

TEST_CASE("token_sparsify keeps [CLS] first and everything at κ = 1") {
  std::vector<float> v(4 * 2);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  const auto tokens = Tensor<float>::from({4, 2}, v);
  const std::vector<float> scores{0.1f, 0.7f, 0.2f};
  const auto all = token_sparsify<float>(tokens, scores, 1.0);
  CHECK(all.kept == std::vector<std::size_t>{0, 1, 2});
  CHECK(all.tokens.rows() == 4);
  const auto some = token_sparsify<float>(tokens, scores, 0.5);
  CHECK(some.kept == std::vector<std::size_t>{1, 2});
  REQUIRE(some.tokens.rows() == 3);
  CHECK(some.tokens.at(0, 0) == 0.0f);  // [CLS]
  CHECK(some.tokens.at(1, 0) == 4.0f);
  CHECK(some.tokens.at(2, 0) == 6.0f);
}

TEST_CASE("default sparsify layer placement") {
  CHECK(default_sparsify_layers(12) == std::vector<std::size_t>{4, 7, 10});
  CHECK(default_sparsify_layers(6) == std::vector<std::size_t>{2, 4, 5});
}

TEST_CASE("ViT forward: unit outputs, pruning schedule, κ = 1 bit-identity") {
  const VisionTransformer<float> vit(small_vit(), 7);
  const Images im = random_images(3, 32, 1);
  const auto out = vit.forward(im, 0.7);
  REQUIRE(out.embeddings.rows() == 3);
  for (std::size_t r = 0; r < 3; ++r) CHECK(row_norm(out.embeddings, r) == doctest::Approx(1.0).epsilon(1e-5));
  REQUIRE(out.traces.size() == 3);
  for (const auto& tr : out.traces) {
    REQUIRE(tr.kept.size() == 3);
    CHECK(tr.kept[0].size() == 45);
    CHECK(tr.kept[1].size() == 32);
    CHECK(tr.kept[2].size() == 23);
    for (std::size_t p : tr.kept[2]) CHECK(p < 64);
  }
  const auto dense = vit.forward(im, 1.0, false);
  const auto keep_all = vit.forward(im, 1.0, true);
  CHECK(std::equal(dense.embeddings.data().begin(), dense.embeddings.data().end(),
                   keep_all.embeddings.data().begin()));
}

TEST_CASE("ViT config validation") {
  ViTConfig c = small_vit();
  c.patch_size = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_vit();
  c.keep_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_vit();
  c.width = 30;
  c.heads = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("text forward: unit norm, pad invariance, one-token sensitivity") {
  const TextTransformer<float> text(small_text(), 3);
  const std::vector<std::vector<std::int32_t>> rows{{5, 6, 7, 1}, {9, 1}};
  const auto e = text.forward(rows);
  for (std::size_t r = 0; r < 2; ++r) CHECK(row_norm(e, r) == doctest::Approx(1.0).epsilon(1e-5));

  const auto padded = text.forward({{5, 6, 7, 1, 0, 0, 0}});
  const auto plain = text.forward({{5, 6, 7, 1}});
  for (std::size_t c = 0; c < plain.cols(); ++c)
    CHECK(padded.at(0, c) == doctest::Approx(plain.at(0, c)).epsilon(1e-6));

  Rng rng(4);
  int differing = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::int32_t> a(6);
    for (auto& id : a) id = static_cast<std::int32_t>(2 + rng.uniform_index(38));
    auto b = a;
    const std::size_t pos = rng.uniform_index(6);
    b[pos] = static_cast<std::int32_t>(2 + (b[pos] - 2 + 1 + rng.uniform_index(37)) % 38);
    const auto ea = text.forward({a});
    const auto eb = text.forward({b});
    bool diff = false;
    for (std::size_t c = 0; c < ea.cols(); ++c) diff = diff || ea.at(0, c) != eb.at(0, c);
    differing += diff;
  }
  CHECK(differing == 100);
}

TEST_CASE("text forward rejects out-of-vocabulary ids and overlong rows") {
  const TextTransformer<float> text(small_text(), 3);
  CHECK_THROWS_AS(text.forward({{5, 40}}), VocabularyError);
  CHECK_THROWS_AS(text.forward({std::vector<std::int32_t>(13, 2)}), ConfigError);
}

TEST_CASE("copy produces equal but independent parameters") {
  const VisionTransformer<float> vit(small_vit(), 1);
  const auto cp = vit.copy(false);
  const auto a = vit.parameters();
  const auto b = cp.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK_FALSE(a[i].tensor.same_storage(b[i].tensor));
    CHECK(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                     b[i].tensor.data().begin()));
    CHECK_FALSE(b[i].tensor.requires_grad());
  }
}
