#include "sdclip/gradcheck_suite.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>

#include "sdclip/encoders.hpp"
#include "sdclip/gradcheck.hpp"
#include "sdclip/losses.hpp"
#include "sdclip/ops.hpp"
#include "sdclip/rng.hpp"
#include "sdclip/train.hpp"

namespace sdclip {

namespace {

using TD = Tensor<double>;

TD random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return TD::from(std::move(shape), std::move(v), true);
}

// Fixed random weighting so non-scalar outputs reduce to a scalar with a
// gradient that is generic in every output coordinate.
TD probe(Rng& rng, const Shape& shape) {
  TD w = random_tensor(rng, shape);
  w.set_requires_grad(false);
  return w;
}

TD reduce(const TD& out, const TD& w) { return sum(mul(out, w)); }

CheckEntry make_entry(std::string group, std::string name, const GradCheckResult& r,
                      double tol) {
  CheckEntry e;
  e.group = std::move(group);
  e.name = std::move(name);
  e.max_rel_error = r.max_rel_error;
  e.tolerance = tol;
  e.status = r.max_rel_error <= tol ? CheckStatus::kPass : CheckStatus::kFail;
  char buf[256];
  std::snprintf(buf, sizeof buf, "worst leaf %zu index %zu: analytic %.10g numeric %.10g",
                r.worst_leaf, r.worst_index, r.analytic_at_worst, r.numeric_at_worst);
  e.detail = buf;
  return e;
}

struct Case {
  std::string name;
  std::function<TD()> f;
  std::vector<TD> leaves;
};

std::vector<Case> primitive_cases(Rng& rng) {
  std::vector<Case> cases;
  auto add_case = [&cases](std::string name, std::function<TD()> f, std::vector<TD> leaves) {
    cases.push_back({std::move(name), std::move(f), std::move(leaves)});
  };
  {
    TD a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2}), w = probe(rng, {3, 2});
    add_case("matmul", [=] { return reduce(matmul(a, b), w); }, {a, b});
  }
  {
    TD a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {5, 4}), w = probe(rng, {3, 5});
    add_case("matmul_nt", [=] { return reduce(matmul_nt(a, b), w); }, {a, b});
  }
  {
    TD a = random_tensor(rng, {3, 4}), w = probe(rng, {4, 3});
    add_case("transpose", [=] { return reduce(transpose(a), w); }, {a});
  }
  {
    TD a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), w = probe(rng, {3, 4});
    add_case("add", [=] { return reduce(add(a, b), w); }, {a, b});
    add_case("sub", [=] { return reduce(sub(a, b), w); }, {a, b});
    add_case("mul", [=] { return reduce(mul(a, b), w); }, {a, b});
  }
  {
    TD a = random_tensor(rng, {6, 3}), b = random_tensor(rng, {2, 3}), w = probe(rng, {6, 3});
    add_case("add_tiled", [=] { return reduce(add_tiled(a, b), w); }, {a, b});
  }
  {
    TD a = random_tensor(rng, {3, 4}), w = probe(rng, {3, 4});
    add_case("scale", [=] { return reduce(scale(a, -1.7), w); }, {a});
    add_case("exp", [=] { return reduce(exp(a), w); }, {a});
    add_case("gelu", [=] { return reduce(gelu(a), w); }, {a});
    add_case("softmax_rows", [=] { return reduce(softmax_rows(a), w); }, {a});
    add_case("log_softmax_rows", [=] { return reduce(log_softmax_rows(a), w); }, {a});
    add_case("l2_normalize", [=] { return reduce(l2_normalize(a), w); }, {a});
    add_case("stop_gradient", [=] { return reduce(mul(stop_gradient(a), a), w); }, {a});
  }
  {
    TD a = random_tensor(rng, {3, 4}), s = random_tensor(rng, {}, 0.5, 1.5), w = probe(rng, {3, 4});
    add_case("div_scalar", [=] { return reduce(div_scalar(a, s), w); }, {a, s});
  }
  {
    TD a = random_tensor(rng, {3, 4});
    add_case("sum", [=] { return sum(a); }, {a});
    add_case("mean", [=] { return mean(a); }, {a});
  }
  {
    TD a = random_tensor(rng, {3, 4}, 0.5, 2.0), w = probe(rng, {3, 4});
    add_case("log", [=] { return reduce(log(a), w); }, {a});
  }
  {
    TD x = random_tensor(rng, {4, 5}), g = random_tensor(rng, {1, 5}, 0.5, 1.5),
       b = random_tensor(rng, {1, 5}), w = probe(rng, {4, 5});
    add_case("layer_norm", [=] { return reduce(layer_norm(x, g, b), w); }, {x, g, b});
  }
  {
    TD a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {3, 3}), w = probe(rng, {5, 3});
    add_case("concat_rows", [=] { return reduce(concat_rows(a, b), w); }, {a, b});
  }
  {
    TD a = random_tensor(rng, {4, 3}), w = probe(rng, {5, 3});
    const std::vector<std::size_t> idx{2, 0, 2, 3, 1};
    add_case("gather_rows", [=] { return reduce(gather_rows(a, idx), w); }, {a});
  }
  {
    TD table = random_tensor(rng, {5, 3}), w = probe(rng, {4, 3});
    const std::vector<std::int32_t> ids{1, 3, 1, 4};
    add_case("embedding_lookup", [=] { return reduce(embedding_lookup(table, ids), w); }, {table});
  }
  {
    TD a = random_tensor(rng, {4, 4}), w = probe(rng, {1, 4});
    add_case("diagonal", [=] { return reduce(diagonal(a), w); }, {a});
  }
  {
    AttentionShape shape{2, 3, 2, false, {}};
    TD qkv = random_tensor(rng, {6, 12}), w = probe(rng, {6, 4});
    add_case("multi_head_attention",
             [=] { return reduce(multi_head_attention(qkv, shape).out, w); }, {qkv});
    AttentionShape causal{2, 3, 2, true, {3, 2}};
    add_case("multi_head_attention(causal, ragged)",
             [=] { return reduce(multi_head_attention(qkv, causal).out, w); }, {qkv});
  }
  return cases;
}

// Unit-row embeddings built from raw leaves, as the encoders emit them.
struct Embeddings {
  TD text_raw, image_raw, image_teacher_raw, text_teacher_raw, log_tau;
};

Embeddings random_embeddings(Rng& rng, std::size_t n, std::size_t d) {
  return {random_tensor(rng, {n, d}), random_tensor(rng, {n, d}), random_tensor(rng, {n, d}),
          random_tensor(rng, {n, d}), TD::from({}, {std::log(0.3)}, true)};
}

std::vector<Case> composite_cases(Rng& rng) {
  std::vector<Case> cases;
  constexpr std::size_t n = 4, d = 3;
  {
    TD logits = random_tensor(rng, {n, n}), lt = TD::from({}, {std::log(0.5)}, true);
    cases.push_back({"info_nce", [=] { return info_nce(logits, exp(lt)); }, {logits, lt}});
    cases.push_back({"clip_loss", [=] { return clip_loss(logits, exp(lt)); }, {logits, lt}});
    TD target = random_tensor(rng, {n, n});
    cases.push_back({"kl_rows", [=] { return kl_rows(target, logits, 0.5); }, {target, logits}});
    cases.push_back(
        {"distill_loss", [=] { return distill_loss(target, logits, 0.5); }, {target, logits}});
  }
  {
    TD t = random_tensor(rng, {n, d}), s = random_tensor(rng, {n, d});
    cases.push_back({"feature_distill_loss",
                     [=] { return feature_distill_loss(l2_normalize(t), l2_normalize(s)); },
                     {t, s}});
    cases.push_back({"alignment_matrix",
                     [=, w = probe(rng, {n, n})] {
                       return reduce(alignment_matrix(l2_normalize(t), l2_normalize(s)).values, w);
                     },
                     {t, s}});
  }
  for (DistillVariant v : all_variants()) {
    const Embeddings e = random_embeddings(rng, n, d);
    const double lambda = v == DistillVariant::kHardOnly ? 1.0 : 0.6;
    const bool needs_tt = variant_needs_text_teacher(v);
    auto matrices = [e, v, needs_tt] {
      std::optional<TD> tt;
      if (needs_tt) tt = l2_normalize(e.text_teacher_raw);
      return build_variant_matrices(v, l2_normalize(e.text_raw), tt, l2_normalize(e.image_raw),
                                    l2_normalize(e.image_teacher_raw));
    };
    std::vector<TD> leaves{e.text_raw, e.image_raw, e.image_teacher_raw, e.log_tau};
    if (needs_tt) leaves.push_back(e.text_teacher_raw);
    const std::string tag(variant_tag(v));
    cases.push_back({"online_loss[" + tag + "]",
                     [=] { return online_loss(matrices(), exp(e.log_tau), lambda).online; },
                     leaves});
    cases.push_back({"total_loss[" + tag + "]",
                     [=] { return total_loss(matrices(), exp(e.log_tau), lambda).total; },
                     leaves});
  }
  {
    ViTConfig vc;
    vc.image_size = 8;
    vc.patch_size = 2;
    vc.depth = 3;
    vc.width = 8;
    vc.heads = 2;
    vc.proj_dim = 4;
    vc.keep_rate = 0.7;
    vc.sparsify_layers = default_sparsify_layers(3);
    const VisionTransformer<double> vit(vc, 5);
    Images images{2, 8, 3, {}};
    for (std::size_t i = 0; i < 2 * 8 * 8 * 3; ++i) images.pixels.push_back(rng.uniform());
    std::vector<TD> leaves;
    // Spread-out weights keep [CLS] attentiveness scores well separated, so
    // the top-k selection stays fixed inside the difference stencil.
    for (const auto& p : vit.parameters()) {
      leaves.push_back(p.tensor);
      for (auto& x : leaves.back().mutable_data()) x = 0.6 * (2.0 * rng.uniform() - 1.0);
    }
    TD w = probe(rng, {2, 4});
    cases.push_back({"vision_transformer(keep 0.7)",
                     [vit, images, w] { return reduce(vit.forward(images).embeddings, w); }, leaves});
  }
  {
    TextConfig tc;
    tc.vocab_size = 12;
    tc.max_len = 5;
    tc.depth = 2;
    tc.width = 8;
    tc.heads = 2;
    tc.proj_dim = 4;
    const TextTransformer<double> text(tc, 6);
    const std::vector<std::vector<std::int32_t>> rows{{3, 7, 2, 1}, {5, 1}};
    std::vector<TD> leaves;
    for (const auto& p : text.parameters()) leaves.push_back(p.tensor);
    TD w = probe(rng, {2, 4});
    cases.push_back({"text_transformer(causal, padded)",
                     [text, rows, w] { return reduce(text.forward(rows), w); }, leaves});
  }
  return cases;
}

// ---- exact-zero gradient-flow contracts on small float encoders ----

TrainConfig contract_config(DistillVariant variant) {
  TrainConfig c;
  c.variant = variant;
  c.ema.text_ema = variant_needs_text_teacher(variant);
  c.vit.image_size = 16;
  c.vit.patch_size = 4;
  c.vit.depth = 3;
  c.vit.width = 16;
  c.vit.heads = 2;
  c.vit.proj_dim = 8;
  c.vit.sparsify_layers = default_sparsify_layers(3);
  c.text.width = 16;
  c.text.depth = 2;
  c.text.heads = 2;
  c.text.proj_dim = 8;
  c.batch_size = 2;
  c.corpus.train_size = 2;
  c.epochs = 1;
  return c;
}

double group_abs_sum(const ParamList<float>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (float g : p.tensor.grad()) acc += std::abs(static_cast<double>(g));
  }
  return acc;
}

struct FlowProbe {
  double text = 0.0, image = 0.0, image_teacher = 0.0, text_teacher = 0.0;
};

// Gradient mass each group receives from one selected loss term.
FlowProbe probe_flow(DistillVariant variant, const std::function<Tensor<float>(const StepForward&)>& term) {
  const TrainConfig config = contract_config(variant);
  ModelState state = init_model(config);
  // Make the teachers differ from the students, as after some EMA steps.
  {
    Rng rng(derive_seed(7, {static_cast<std::uint64_t>(variant)}));
    for (auto& p : state.image_teacher_params()) {
      for (auto& x : Tensor<float>(p.tensor).mutable_data()) x += 0.05f * static_cast<float>(rng.normal());
    }
    for (auto& p : state.text_teacher_params()) {
      for (auto& x : Tensor<float>(p.tensor).mutable_data()) x += 0.05f * static_cast<float>(rng.normal());
    }
  }
  // Teachers get accumulators so that any leak would be visible.
  for (auto& p : state.image_teacher_params()) Tensor<float>(p.tensor).set_requires_grad(true);
  for (auto& p : state.text_teacher_params()) Tensor<float>(p.tensor).set_requires_grad(true);

  const PairBatch batch = make_batch(11, 2, 0.0, config.vit.image_size, config.text.max_len);
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  const StepForward f = step_forward(batch, state, config, config.lambda_schedule().at(0, 1));
  tape.backward(term(f));
  return {group_abs_sum(state.text.parameters()), group_abs_sum(state.image.parameters()),
          group_abs_sum(state.image_teacher_params()), group_abs_sum(state.text_teacher_params())};
}

CheckEntry contract(std::string name, double observed, bool want_zero) {
  CheckEntry e;
  e.group = "contract";
  e.name = std::move(name);
  e.max_rel_error = observed;
  e.tolerance = 0.0;
  const bool ok = want_zero ? observed == 0.0 : observed > 0.0;
  e.status = ok ? CheckStatus::kPass : CheckStatus::kFail;
  char buf[128];
  std::snprintf(buf, sizeof buf, "sum|grad| = %.6g (expected %s)", observed,
                want_zero ? "exactly 0" : "> 0");
  e.detail = buf;
  return e;
}

std::vector<CheckEntry> contract_checks() {
  std::vector<CheckEntry> out;
  auto distill = [](const StepForward& f) { return *f.distill; };
  auto clip_student = [](const StepForward& f) { return f.clip_student; };
  auto clip_teacher = [](const StepForward& f) { return *f.clip_teacher; };
  auto total = [](const StepForward& f) { return f.total; };

  const FlowProbe e_distill = probe_flow(DistillVariant::kEclipse, distill);
  const FlowProbe e_student = probe_flow(DistillVariant::kEclipse, clip_student);
  const FlowProbe e_teacher = probe_flow(DistillVariant::kEclipse, clip_teacher);
  out.push_back(contract("eclipse: d distill / d text = 0", e_distill.text, true));
  out.push_back(contract("eclipse: d clip(A) / d text = 0", e_student.text, true));
  out.push_back(contract("eclipse: d clip(Abar) / d text != 0", e_teacher.text, false));
  out.push_back(contract("eclipse: d distill / d image != 0", e_distill.image, false));
  out.push_back(contract("eclipse: d clip(A) / d image != 0", e_student.image, false));
  out.push_back(contract("eclipse: d clip(Abar) / d image = 0", e_teacher.image, true));

  for (DistillVariant v : all_variants()) {
    const FlowProbe p = probe_flow(v, total);
    out.push_back(contract(std::string(variant_tag(v)) + ": d total / d teachers = 0",
                           p.image_teacher + p.text_teacher, true));
  }
  const FlowProbe dual = probe_flow(DistillVariant::kDualMomentum, distill);
  out.push_back(contract("dual_momentum: d distill / d text != 0 (2 pairs)", dual.text, false));
  return out;
}

// Without frozen stop-gradients the numeric derivative also sees the stopped
// path, so it must disagree with the tape.
CheckEntry stop_gradient_divergence(Rng& rng) {
  const Embeddings e = random_embeddings(rng, 4, 3);
  auto f = [e] {
    const auto m = build_variant_matrices(DistillVariant::kEclipse, l2_normalize(e.text_raw),
                                          std::optional<TD>{}, l2_normalize(e.image_raw),
                                          l2_normalize(e.image_teacher_raw));
    return online_loss(m, exp(e.log_tau), 0.5).online;
  };
  const GradCheckResult r =
      finite_difference_check(f, {e.text_raw}, 1e-4, /*honor_stop_gradient=*/false);
  CheckEntry entry = make_entry("design", "stop-gradient on text in A (online loss, eclipse)", r,
                                kCompositeTolerance);
  const bool diverges = r.max_rel_error > kCompositeTolerance;
  entry.status = diverges ? CheckStatus::kPassByDesign : CheckStatus::kFail;
  entry.detail = (diverges ? "numeric sees the stopped path, tape does not; " : "no divergence: ") +
                 entry.detail;
  return entry;
}

}  // namespace

std::string status_name(CheckStatus s) {
  switch (s) {
    case CheckStatus::kPass:
      return "PASS";
    case CheckStatus::kFail:
      return "FAIL";
    case CheckStatus::kPassByDesign:
      return "PASS-BY-DESIGN";
  }
  return "?";
}

bool SuiteReport::all_passed() const { return failures() == 0; }

std::size_t SuiteReport::failures() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.status == CheckStatus::kFail;
  return n;
}

std::vector<CheckEntry> run_contract_checks() { return contract_checks(); }

std::vector<CheckEntry> run_primitive_checks(std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x7072}));
  std::vector<CheckEntry> out;
  for (auto& c : primitive_cases(rng)) {
    out.push_back(make_entry("primitive", c.name, finite_difference_check(c.f, c.leaves),
                             kPrimitiveTolerance));
  }
  return out;
}

SuiteReport run_gradcheck_suite(std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteReport report;
  report.entries = run_primitive_checks(seed);

  Rng rng(derive_seed(seed, {0x636f}));
  for (auto& c : composite_cases(rng)) {
    report.entries.push_back(make_entry("composite", c.name,
                                        finite_difference_check(c.f, c.leaves),
                                        kCompositeTolerance));
  }
  for (auto& e : contract_checks()) report.entries.push_back(std::move(e));
  report.entries.push_back(stop_gradient_divergence(rng));

  // The checker must notice a wrong backward rule.
  {
    const bool was_broken = testing::broken_softmax_backward();
    testing::set_broken_softmax_backward(true);
    Rng mrng(derive_seed(seed, {0x6d75}));
    TD a = random_tensor(mrng, {3, 4}), w = probe(mrng, {3, 4});
    const GradCheckResult r =
        finite_difference_check([=] { return reduce(softmax_rows(a), w); }, {a});
    testing::set_broken_softmax_backward(was_broken);
    CheckEntry e = make_entry("mutation", "checker flags a broken softmax_rows backward", r,
                              kPrimitiveTolerance);
    e.status = r.max_rel_error > kPrimitiveTolerance ? CheckStatus::kPass : CheckStatus::kFail;
    report.entries.push_back(std::move(e));
  }
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string format_entry(const CheckEntry& e) {
  char buf[640];
  std::snprintf(buf, sizeof buf, "%-15s %-10s %-55s err=%.3e tol=%.0e  %s",
                status_name(e.status).c_str(), e.group.c_str(), e.name.c_str(), e.max_rel_error,
                e.tolerance, e.detail.c_str());
  return buf;
}

}  // namespace sdclip
