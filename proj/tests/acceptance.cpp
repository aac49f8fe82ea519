// Acceptance runner: one PASS/FAIL line per criterion.
//   sdclip_acceptance [--only 1,2,...] [--configs DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "sdclip/ablate.hpp"
#include "sdclip/checkpoint.hpp"
#include "sdclip/eval.hpp"
#include "sdclip/gradcheck_suite.hpp"
#include "sdclip/losses.hpp"
#include "sdclip/momentum.hpp"
#include "sdclip/rng.hpp"
#include "sdclip/train.hpp"

using namespace sdclip;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sdclip_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.vit.image_size = 16;
  c.vit.patch_size = 4;
  c.vit.depth = 3;
  c.vit.width = 16;
  c.vit.heads = 2;
  c.vit.proj_dim = 8;
  c.vit.sparsify_layers = {1, 2};
  c.text.depth = 1;
  c.text.width = 16;
  c.text.heads = 2;
  c.text.proj_dim = 8;
  c.epochs = 2;
  c.batch_size = 16;
  c.corpus.train_size = 64;
  c.corpus.eval_size = 64;
  c.optim.warmup_steps = 4;
  return c;
}

fs::path g_configs;

// 1 -------------------------------------------------------------------------
Outcome gradient_oracle() {
  const SuiteReport r = run_gradcheck_suite(0);
  Outcome o;
  o.pass = r.all_passed() && r.seconds < 60.0;
  o.detail = fmt("%zu checks, %zu failed, %.2f s", r.entries.size(), r.failures(), r.seconds);
  for (const auto& e : r.entries)
    if (e.status == CheckStatus::kFail) o.detail += "; " + format_entry(e);
  return o;
}

// 2 -------------------------------------------------------------------------
Outcome closed_forms() {
  using TD = Tensor<double>;
  std::string detail;
  bool ok = true;
  for (std::size_t n : {2u, 8u, 64u}) {
    const double got = info_nce(TD::from({n, n}, std::vector<double>(n * n, 0.42)), 0.07).item();
    const double err = std::abs(got - std::log(double(n)));
    ok = ok && err <= 1e-6;
    detail += fmt("lnN[%zu] err %.1e; ", n, err);
  }
  const double id_err =
      std::abs(info_nce(TD::from({2, 2}, {1, 0, 0, 1}), 1.0).item() - std::log1p(std::exp(-1.0)));
  ok = ok && id_err <= 1e-6;
  const TD a = TD::from({2, 3}, {0.3, -0.7, 0.1, 0.9, 0.2, -0.4});
  const double kl_eq = kl_rows(a, a, 0.07).item();
  ok = ok && kl_eq == 0.0;
  const double p1 = std::exp(2.0) / (1.0 + std::exp(2.0));
  const double oracle = (2.0 * p1 - 1.0) * 2.0;
  const double kl = kl_rows(TD::from({1, 2}, {2, 0}), TD::from({1, 2}, {0, 2}), 1.0).item();
  ok = ok && std::abs(kl - 1.52318) <= 1e-4 && std::abs(kl - oracle) <= 1e-12;
  detail += fmt("identity err %.1e; KL(eq) = %g; KL = %.6f (oracle %.6f)", id_err, kl_eq, kl, oracle);
  return {ok, detail};
}

// 3 -------------------------------------------------------------------------
Outcome contracts() {
  const auto entries = run_contract_checks();
  Outcome o{true, ""};
  std::size_t failed = 0;
  for (const auto& e : entries) {
    if (e.status == CheckStatus::kFail) {
      ++failed;
      o.detail += e.name + " [" + e.detail + "]; ";
    }
  }
  o.pass = failed == 0 && !entries.empty();
  o.detail += fmt("%zu exact-zero/non-zero gradient-flow checks, %zu failed", entries.size(), failed);
  return o;
}

// 4 -------------------------------------------------------------------------
Outcome ema_law() {
  ViTConfig vc;
  const VisionTransformer<float> student(vc, 1);
  const VisionTransformer<float> teacher_init(vc, 2);
  const auto frozen = student.parameters();
  const auto teacher = teacher_init.copy(false).parameters();
  auto dist = [&] {
    double s = 0;
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      const auto a = teacher[i].tensor.data(), b = frozen[i].tensor.data();
      for (std::size_t k = 0; k < a.size(); ++k) s += std::pow(double(a[k]) - double(b[k]), 2);
    }
    return std::sqrt(s);
  };
  const double d0 = dist();
  bool ok = d0 > 0;
  std::string detail;
  for (int t = 1; t <= 100; ++t) {
    ema_update(teacher, frozen, 0.994);
    if (t == 1 || t == 10 || t == 100) {
      const double ratio = dist() / d0, want = std::pow(0.994, t);
      const double rel = std::abs(ratio - want) / want;
      ok = ok && rel <= 1e-4;
      detail += fmt("t=%d ratio %.7f vs %.7f (rel %.1e); ", t, ratio, want, rel);
    }
  }
  return {ok, detail};
}

// 5 -------------------------------------------------------------------------
Outcome sparsify_equivalence() {
  ViTConfig vc;  // 64 px, patch 8: 64 patch tokens, depth 6
  const VisionTransformer<float> vit(vc, 5);
  Images im;
  im.count = 100;
  im.size = vc.image_size;
  im.channels = 3;
  im.pixels.resize(im.count * im.pixels_per_image());
  Rng rng(123);
  for (auto& p : im.pixels) p = static_cast<float>(rng.uniform());
  const auto dense = vit.forward(im, 1.0, false);
  const auto keep_all = vit.forward(im, 1.0, true);
  std::size_t identical = 0;
  for (std::size_t r = 0; r < im.count; ++r) {
    bool same = true;
    for (std::size_t c = 0; c < dense.embeddings.cols(); ++c)
      same = same && dense.embeddings.at(r, c) == keep_all.embeddings.at(r, c);
    identical += same;
  }
  const auto pruned = vit.forward(im, 0.7, true);
  std::size_t schedule_ok = 0;
  for (const auto& tr : pruned.traces) {
    schedule_ok += tr.kept.size() == 3 && tr.kept[0].size() == 45 && tr.kept[1].size() == 32 &&
                   tr.kept[2].size() == 23;
  }
  return {identical == 100 && schedule_ok == 100,
          fmt("%zu/100 bit-identical at keep 1.0; %zu/100 traces with 64->45->32->23", identical,
              schedule_ok)};
}

// 6 -------------------------------------------------------------------------
Outcome throughput_trend() {
  const TrainConfig desk = load_train_config(g_configs / "desk.json");
  const VisionTransformer<float> vit(desk.vit, 0);
  BenchOptions o;  // batch 128, 20 repeats
  const auto rows = throughput_bench(vit, {1.0, 0.9, 0.8, 0.7, 0.6, 0.5}, o);
  bool strict = true;
  std::string detail;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i > 0) strict = strict && rows[i].images_per_second > rows[i - 1].images_per_second;
    detail += fmt("%.1f:%.0f img/s ", rows[i].keep_rate, rows[i].images_per_second);
  }
  const double speedup = rows.back().speedup;
  detail += fmt("; keep 0.5 speedup %.2fx; strictly increasing: %s", speedup, strict ? "yes" : "no");
  return {strict && speedup >= 1.3, detail};
}

// 7 -------------------------------------------------------------------------
Outcome directional_reproduction() {
  const TrainConfig base = load_train_config(g_configs / "acceptance.json");
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    double r1[2];
    for (int arm = 0; arm < 2; ++arm) {
      TrainConfig c = base;
      c.seed = seed;
      if (arm == 1) {
        c.variant = DistillVariant::kHardOnly;
        c.teacher_enabled = false;
      }
      RunOptions opts;
      opts.write_files = false;
      const RunResult run = run_training(c, opts);
      r1[arm] = evaluate(run.state, c, EvalEncoder::kStudent, "").retrieval.text_to_image_r1;
    }
    wins += r1[0] >= r1[1];
    detail += fmt("seed %llu eclipse %.3f vs clip %.3f; ", static_cast<unsigned long long>(seed), r1[0], r1[1]);
  }
  detail += fmt("eclipse >= clip in %d/3 seeds", wins);
  return {wins >= 2, detail};
}

// 8 -------------------------------------------------------------------------
Outcome ablation_harness() {
  TrainConfig c = tiny_config();
  const fs::path out = scratch("ablate");
  bool rejected = false;
  try {
    run_ablation(c, {DistillVariant::kDualMomentum}, out, false);
  } catch (const ConfigError&) {
    rejected = true;
  }
  c.ema.text_ema = true;
  std::vector<DistillVariant> tags(all_variants().rbegin(), all_variants().rend());
  const auto rows = run_ablation(c, tags, out, false);
  bool order = rows.size() == all_variants().size();
  bool dual_uses_text_ema = false;
  for (std::size_t i = 0; order && i < rows.size(); ++i) {
    order = rows[i].variant == all_variants()[i];
    if (rows[i].variant == DistillVariant::kDualMomentum) dual_uses_text_ema = rows[i].text_ema_used;
  }
  const std::string md = ablation_markdown(rows);
  const auto table_lines = static_cast<std::size_t>(std::count(md.begin(), md.end(), '\n'));
  return {rejected && order && dual_uses_text_ema && table_lines == rows.size() + 2,
          fmt("%zu rows in table order: %s; dual_momentum without text EMA rejected: %s; "
              "dual_momentum used text EMA: %s",
              rows.size(), order ? "yes" : "no", rejected ? "yes" : "no",
              dual_uses_text_ema ? "yes" : "no")};
}

// 9 -------------------------------------------------------------------------
Outcome checkpoint_round_trip() {
  const TrainConfig c = tiny_config();
  const fs::path straight = scratch("ckpt_straight"), split = scratch("ckpt_split");
  RunOptions a;
  a.out_dir = straight;
  const RunResult full = run_training(c, a);
  const std::string before = to_json(evaluate(full.state, c, EvalEncoder::kStudent, "id")).dump(2);
  const LoadedCheckpoint ck = load_checkpoint(full.final_checkpoint);
  const std::string after = to_json(evaluate(ck.state, ck.config, EvalEncoder::kStudent, "id")).dump(2);

  RunOptions first;
  first.out_dir = split;
  first.stop_after_steps = 3;
  const RunResult part = run_training(c, first);
  RunOptions rest;
  rest.out_dir = split;
  rest.resume_from = part.final_checkpoint;
  run_training(c, rest);
  const bool metrics_equal = slurp(straight / "metrics.csv") == slurp(split / "metrics.csv");
  const bool weights_equal =
      slurp(straight / "final" / "weights.bin") == slurp(split / "final" / "weights.bin");
  return {before == after && metrics_equal && weights_equal,
          fmt("eval byte-identical after reload: %s; resume at step 3 of %zu: metrics %s, weights %s",
              before == after ? "yes" : "no", c.total_steps(), metrics_equal ? "identical" : "differ",
              weights_equal ? "identical" : "differ")};
}

// 10 ------------------------------------------------------------------------
Outcome chance_level() {
  const TrainConfig desk = load_train_config(g_configs / "desk.json");
  const ModelState s = init_model(desk);
  const EvalReport r = evaluate(s, desk, EvalEncoder::kStudent, "init");
  const double n = static_cast<double>(r.eval_pairs);
  const double p16 = 1.0 / 16.0, s16 = std::sqrt(p16 * (1 - p16) / n);
  const double pm = 1.0 / n, sm = std::sqrt(pm * (1 - pm) / n);
  const bool zs = std::abs(r.zero_shot_top1 - p16) <= 3 * s16;
  const bool t2i = std::abs(r.retrieval.text_to_image_r1 - pm) <= 3 * sm;
  const bool i2t = std::abs(r.retrieval.image_to_text_r1 - pm) <= 3 * sm;
  return {zs && t2i && i2t,
          fmt("zero-shot %.4f (1/16 +- %.4f); R@1 t2i %.4f, i2t %.4f (1/%g +- %.4f)", r.zero_shot_top1,
              3 * s16, r.retrieval.text_to_image_r1, r.retrieval.image_to_text_r1, n, 3 * sm)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria runner"};
  std::string only;
  std::string configs = SDCLIP_CONFIG_DIR;
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_option("--configs", configs, "directory holding desk.json and acceptance.json");
  CLI11_PARSE(app, argc, argv);
  g_configs = configs;

  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) selected.insert(std::stoi(tok));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"closed-form loss oracles", closed_forms},
      {"stop-gradient and EMA contracts", contracts},
      {"EMA law", ema_law},
      {"sparsification equivalence", sparsify_equivalence},
      {"throughput trend", throughput_trend},
      {"directional retrieval reproduction", directional_reproduction},
      {"ablation harness", ablation_harness},
      {"checkpoint round trip", checkpoint_round_trip},
      {"chance-level sanity", chance_level},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id,
                criteria[i].first.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
