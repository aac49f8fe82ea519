#include <doctest.h>

#include <cmath>

#include "sdclip/gradcheck.hpp"
#include "sdclip/ops.hpp"
#include "sdclip/rng.hpp"

using namespace sdclip;
using TD = Tensor<double>;

namespace {
TD mat(std::size_t r, std::size_t c, std::vector<double> v, bool rg = false) {
  return TD::from({r, c}, std::move(v), rg);
}

void check_close(std::span<const double> got, const std::vector<double>& want, double tol) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (tol == 0) CHECK(got[i] == want[i]);
    else CHECK(got[i] == doctest::Approx(want[i]).epsilon(tol));
  }
}

TD random_leaf(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return TD::from(std::move(shape), std::move(v), true);
}
}  // namespace

TEST_CASE("matmul hand-arithmetic oracle") {
  const TD out = matmul(mat(2, 2, {1, 2, 3, 4}), mat(2, 1, {1, 1}));
  CHECK(out.shape() == Shape{2, 1});
  check_close(out.data(), {3, 7}, 0);
}

TEST_CASE("matmul identity and annihilator") {
  const TD m = mat(2, 2, {0.3, -1.2, 4.0, 2.5});
  const TD out = matmul(mat(2, 2, {1, 0, 0, 1}), m);
  check_close(out.data(), {0.3, -1.2, 4.0, 2.5}, 0);
  const TD z = matmul(TD::zeros({3, 4}), mat(4, 2, {1, 2, 3, 4, 5, 6, 7, 8}));
  CHECK(z.shape() == Shape{3, 2});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul rejects inner-dimension mismatch") {
  CHECK_THROWS_AS(matmul(TD::zeros({2, 3}), TD::zeros({2, 3})), DimensionError);
  CHECK_THROWS_AS(add(TD::zeros({2, 3}), TD::zeros({3, 2})), DimensionError);
}

TEST_CASE("softmax rows closed forms") {
  check_close(softmax_rows(mat(1, 3, {0, 0, 0})).data(), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
  const double c = 17.25;
  check_close(softmax_rows(mat(1, 2, {c, c + std::log(2.0)})).data(), {1.0 / 3, 2.0 / 3}, 1e-12);
  check_close(softmax_rows(mat(1, 1, {-3.0})).data(), {1.0}, 0);
  // Large logits stay finite.
  const TD big = softmax_rows(mat(1, 2, {1000.0, 0.0}));
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
}

TEST_CASE("l2_normalize examples") {
  check_close(l2_normalize(mat(1, 2, {3, 4})).data(), {0.6, 0.8}, 1e-12);
  const TD u = l2_normalize(mat(1, 2, {0.6, 0.8}));
  check_close(u.data(), {0.6, 0.8}, 1e-11);
  const TD z = l2_normalize(mat(1, 2, {0, 0}));
  CHECK(z.data()[0] == 0.0);
  CHECK(z.data()[1] == 0.0);
}

TEST_CASE("layer_norm, gelu, mean degenerate cases") {
  const TD ln = layer_norm(mat(1, 4, {2, 2, 2, 2}), mat(1, 4, {1, 1, 1, 1}), mat(1, 4, {0, 0, 0, 0}));
  for (double v : ln.data()) CHECK(v == 0.0);
  CHECK(gelu(mat(1, 1, {0.0})).item() == 0.0);
  CHECK(mean(mat(1, 3, {1, 2, 3})).item() == 2.0);
}

TEST_CASE("stop_gradient: identity forward, zero backward") {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  TD x = mat(1, 3, {1, -2, 3}, true);
  TD y = mat(1, 3, {0.5, 4, -1}, true);
  const TD sx = stop_gradient(x);
  check_close(sx.data(), {1, -2, 3}, 0);
  tape.backward(sum(mul(sx, y)));
  for (double g : x.grad()) CHECK(g == 0.0);
  check_close(y.grad(), {1, -2, 3}, 0);
}

TEST_CASE("backward of polynomial losses") {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  TD x = mat(2, 2, {1, -2, 0.5, 3}, true);
  tape.backward(sum(x));
  check_close(x.grad(), {1, 1, 1, 1}, 0);
  x.zero_grad();
  tape.backward(sum(mul(x, x)));
  check_close(x.grad(), {2, -4, 1, 6}, 0);
}

TEST_CASE("backward contract errors") {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  TD x = mat(1, 2, {1, 2}, true);
  CHECK_THROWS_AS(tape.backward(add(x, x)), ContractError);  // not a scalar
  TD detached = TD::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(detached), ContractError);  // not on the tape
}

TEST_CASE("no tape, no recording") {
  TD x = mat(1, 2, {1, 2}, true);
  const TD y = sum(mul(x, x));
  CHECK_FALSE(y.requires_grad());
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  {
    NoGradScope<double> ng;
    const TD z = sum(x);
    CHECK_FALSE(z.requires_grad());
  }
  CHECK(tape.size() == 0);
  const TD w = sum(x);
  CHECK(w.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("gather_rows scatter-adds repeated rows") {
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  TD x = mat(3, 2, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<std::size_t> idx{2, 2, 0};
  const TD g = gather_rows(x, idx);
  check_close(g.data(), {5, 6, 5, 6, 1, 2}, 0);
  tape.backward(sum(g));
  check_close(x.grad(), {1, 1, 0, 0, 2, 2}, 0);
}

TEST_CASE("embedding_lookup rejects out-of-range ids") {
  const TD table = TD::zeros({4, 2});
  const std::vector<std::int32_t> bad{0, 4};
  CHECK_THROWS_AS(embedding_lookup(table, bad), VocabularyError);
  const std::vector<std::int32_t> neg{-1};
  CHECK_THROWS_AS(embedding_lookup(table, neg), VocabularyError);
}

TEST_CASE("attention masks: causal rows ignore the future, padded keys are ignored") {
  Rng rng(3);
  TD qkv = random_leaf(rng, {4, 6});  // batch 1, seq 4, width 2, 1 head
  const auto full = multi_head_attention(qkv, {1, 4, 1, true, {}});
  // Row 0 of a causal head attends only to itself.
  const auto& p = *full.probs;
  CHECK(p[0] == doctest::Approx(1.0));
  for (std::size_t j = 1; j < 4; ++j) CHECK(p[j] == 0.0);
  const auto ragged = multi_head_attention(qkv, {1, 4, 1, false, {2}});
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK((*ragged.probs)[r * 4 + 2] == 0.0);
    CHECK((*ragged.probs)[r * 4 + 3] == 0.0);
  }
}

TEST_CASE("finite_difference_check: sum is exact, info_nce-like composite within 1e-6") {
  Rng rng(9);
  const auto r = finite_difference_check([](const TD& x) { return sum(x); }, random_leaf(rng, {3, 3}));
  CHECK(r.max_rel_error < 1e-9);
  const auto r2 = finite_difference_check(
      [](const TD& a) { return scale(mean(diagonal(log_softmax_rows(a))), -1.0); },
      random_leaf(rng, {4, 4}));
  CHECK(r2.max_rel_error <= 1e-6);
}

TEST_CASE("finite_difference_check flags a stop-gradient-only path when not frozen") {
  Rng rng(10);
  TD x = random_leaf(rng, {2, 2});
  auto f = [](const TD& v) { return sum(mul(stop_gradient(v), v)); };
  const auto frozen = finite_difference_check(f, x, 1e-4, true);
  CHECK(frozen.max_rel_error <= 1e-6);
  const auto open = finite_difference_check(f, x, 1e-4, false);
  CHECK(open.max_rel_error > 1e-2);
}

TEST_CASE("mutation hook breaks softmax backward and is detected") {
  Rng rng(11);
  TD x = random_leaf(rng, {2, 3});
  TD w = random_leaf(rng, {2, 3});
  w.set_requires_grad(false);
  auto f = [w](const TD& v) { return sum(mul(softmax_rows(v), w)); };
  testing::set_broken_softmax_backward(true);
  const auto broken = finite_difference_check(f, x);
  testing::set_broken_softmax_backward(false);
  const auto fixed = finite_difference_check(f, x);
  CHECK(broken.max_rel_error > 1e-3);
  CHECK(fixed.max_rel_error <= 1e-6);
}

TEST_CASE("Tensor constructor validates data length") {
  CHECK_THROWS_AS(TD::from({2, 2}, {1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(TD::from({2, 2}, {1, 2, 3, 4}).item(), ContractError);
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(derive_seed(5, {1})), b(derive_seed(5, {1})), c(derive_seed(5, {2}));
  const auto x = a.next_u64();
  CHECK(x == b.next_u64());
  CHECK(x != c.next_u64());
  Rng u(1);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
    CHECK(u.uniform_index(7) < 7);
  }
}
