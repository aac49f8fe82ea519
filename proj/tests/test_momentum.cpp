#include <doctest.h>

#include <cmath>

#include "sdclip/momentum.hpp"

using namespace sdclip;
using TF = Tensor<float>;

namespace {
ParamList<float> params(float value, std::size_t n = 3) {
  return {{"w.weight", TF::from({1, n}, std::vector<float>(n, value))}};
}
}  // namespace

TEST_CASE("ema_update fixed points and arithmetic") {
  auto teacher = params(0.25f);
  const auto online = params(1.0f);
  ema_update(teacher, online, 1.0);
  for (float v : teacher[0].tensor.data()) CHECK(v == 0.25f);
  ema_update(teacher, online, 0.0);
  for (float v : teacher[0].tensor.data()) CHECK(v == 1.0f);
  auto zero = params(0.0f);
  ema_update(zero, online, 0.994);
  for (float v : zero[0].tensor.data()) CHECK(v == doctest::Approx(0.006).epsilon(1e-6));
}

TEST_CASE("ema_update contracts") {
  auto teacher = params(0.0f, 3);
  CHECK_THROWS_AS(ema_update(teacher, params(1.0f, 4), 0.9), ContractError);
  ParamList<float> renamed{{"other", TF::zeros({1, 3})}};
  CHECK_THROWS_AS(ema_update(teacher, renamed, 0.9), ContractError);
}

TEST_CASE("ema_update contracts geometrically toward a frozen student") {
  auto teacher = params(1.0f);
  const auto online = params(0.0f);
  for (int t = 1; t <= 100; ++t) {
    ema_update(teacher, online, 0.994);
    if (t == 1 || t == 10 || t == 100)
      CHECK(teacher[0].tensor.data()[0] == doctest::Approx(std::pow(0.994, t)).epsilon(1e-4));
  }
}

TEST_CASE("center update examples") {
  const TF batch = TF::from({2, 2}, {1, 2, 3, 4});
  EmbeddingCenter c(2);
  c.values() = {0.5f, -0.5f};
  c.update(batch, 1.0);
  CHECK(c.values() == std::vector<float>{0.5f, -0.5f});
  EmbeddingCenter z(2);
  z.update(batch, 0.0);
  CHECK(z.values() == std::vector<float>{2.0f, 3.0f});

  const TF constant = TF::from({3, 2}, {0.6f, 0.8f, 0.6f, 0.8f, 0.6f, 0.8f});
  EmbeddingCenter g(2);
  for (int t = 1; t <= 30; ++t) {
    g.update(constant, 0.9);
    const double expect = 0.6 * (1.0 - std::pow(0.9, t));
    CHECK(g.values()[0] == doctest::Approx(expect).epsilon(1e-5));
  }
  CHECK_THROWS_AS(g.update(TF::zeros({1, 3}), 0.9), DimensionError);
}

TEST_CASE("apply_center identity at zero and finite when the embedding equals the center") {
  const TF e = TF::from({1, 2}, {0.6f, 0.8f});
  EmbeddingCenter zero(2);
  const TF same = zero.apply(TF::from({1, 2}, {3.0f, 4.0f}));
  CHECK(same.data()[0] == doctest::Approx(0.6));
  CHECK(same.data()[1] == doctest::Approx(0.8));
  EmbeddingCenter c(2);
  c.values() = {0.6f, 0.8f};
  const TF out = c.apply(e);
  for (float v : out.data()) CHECK(std::isfinite(v));
  EmbeddingCenter shift(2);
  shift.values() = {0.6f, 0.0f};
  const TF s = shift.apply(e);
  CHECK(s.data()[0] == doctest::Approx(0.0));
  CHECK(s.data()[1] == doctest::Approx(1.0));
}
