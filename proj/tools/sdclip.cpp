// sdclip: train / eval / bench / ablate / gradcheck over JSON config files.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sdclip/ablate.hpp"
#include "sdclip/checkpoint.hpp"
#include "sdclip/eval.hpp"
#include "sdclip/gradcheck_suite.hpp"
#include "sdclip/ops.hpp"
#include "sdclip/train.hpp"

namespace fs = std::filesystem;
using namespace sdclip;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_resolved_config(const fs::path& dir, const TrainConfig& config,
                           nlohmann::ordered_json run) {
  nlohmann::ordered_json j = to_json(config);
  j["run"] = std::move(run);
  write_text(dir / "resolved_config.json", j.dump(2) + "\n");
}

TrainConfig load_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
  TrainConfig c = load_train_config(path);
  if (seed) {
    c.seed = *seed;
    c.validate();
  }
  return c;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string resume;
  std::optional<std::size_t> stop_after;
  std::size_t dump_pairs = 0;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const TrainConfig config = load_with_seed(a.config, a.seed);
  const fs::path out(a.out);
  fs::create_directories(out);
  nlohmann::ordered_json run;
  run["command"] = "train";
  run["out"] = a.out;
  run["resume"] = a.resume;
  run["stop_after_steps"] = a.stop_after ? nlohmann::ordered_json(*a.stop_after) : nullptr;
  run["dump_pairs"] = a.dump_pairs;
  write_resolved_config(out, config, run);

  if (a.dump_pairs > 0) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < std::min(a.dump_pairs, config.corpus.train_size); ++i) idx.push_back(i);
    dump_pairs(train_corpus(config).materialize(idx, config.vit.image_size, config.text.max_len),
               out / "pairs");
  }

  RunOptions opts;
  opts.out_dir = out;
  if (!a.resume.empty()) opts.resume_from = fs::path(a.resume);
  opts.stop_after_steps = a.stop_after;
  opts.verbose = !a.quiet;
  const RunResult r = run_training(config, opts);
  std::cout << "trained " << r.state.step << " steps; final checkpoint " << r.final_checkpoint.string()
            << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& encoder, const std::string& out,
             std::optional<double> keep_rate) {
  const EvalEncoder enc = parse_eval_encoder(encoder);
  if (keep_rate && !(*keep_rate > 0.0 && *keep_rate <= 1.0)) {
    throw ConfigError("--keep-rate must lie in (0, 1]");
  }
  const LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const EvalReport report = evaluate(ck.state, ck.config, enc, ck.id, keep_rate.value_or(-1.0));
  const std::string text = to_json(report).dump(2) + "\n";
  if (!out.empty()) write_text(out, text);
  std::cout << text;
  return kExitOk;
}

int cmd_bench(const std::string& checkpoint, const std::string& config_path,
              const std::string& keep_rates, const BenchOptions& opts, const std::string& out) {
  std::vector<double> rates;
  for (const auto& s : split_list(keep_rates)) {
    double v = 0.0;
    try {
      std::size_t used = 0;
      v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
      throw ConfigError("--keep-rates: '" + s + "' is not a number");
    }
    if (!(v > 0.0 && v <= 1.0)) throw ConfigError("--keep-rates: " + s + " lies outside (0, 1]");
    rates.push_back(v);
  }
  if (opts.repeats < 20) {
    throw ConfigError("--repeats must be at least 20, got " + std::to_string(opts.repeats));
  }
  std::optional<ModelState> state;
  if (!checkpoint.empty()) {
    state.emplace(load_checkpoint(checkpoint).state);
  } else if (!config_path.empty()) {
    state.emplace(init_model(load_train_config(config_path)));
  } else {
    throw ConfigError("bench needs --checkpoint or --config");
  }
  const auto rows = throughput_bench(state->image, rates, opts);
  std::printf("%-10s %-12s %-12s %-8s\n", "keep_rate", "median_ms", "img/s", "speedup");
  for (const auto& r : rows) {
    std::printf("%-10.2f %-12.3f %-12.1f %-8.3f\n", r.keep_rate, r.median_ms, r.images_per_second,
                r.speedup);
  }
  if (!bench_is_monotone(rows)) {
    std::fprintf(stderr, "warning: throughput is not strictly increasing as keep rate decreases\n");
  }
  if (!out.empty()) write_text(out, bench_json(rows, opts).dump(2) + "\n");
  return kExitOk;
}

int cmd_ablate(const std::string& variants, const std::string& config_path,
               std::optional<std::uint64_t> seed, const std::string& out, bool quiet) {
  std::vector<DistillVariant> list;
  for (const auto& tag : split_list(variants)) list.push_back(parse_variant(tag));
  const TrainConfig base = load_with_seed(config_path, seed);
  const fs::path dir(out);
  fs::create_directories(dir);
  nlohmann::ordered_json run;
  run["command"] = "ablate";
  run["variants"] = split_list(variants);
  run["out"] = out;
  write_resolved_config(dir, base, run);
  const auto rows = run_ablation(base, list, dir, !quiet);
  const std::string md = ablation_markdown(rows);
  write_text(dir / "ablation.md", md);
  write_text(dir / "ablation.json", ablation_json(rows).dump(2) + "\n");
  std::cout << md;
  return kExitOk;
}

int cmd_gradcheck(bool break_softmax, const std::string& out) {
  if (break_softmax) testing::set_broken_softmax_backward(true);
  const SuiteReport report = run_gradcheck_suite();
  std::ostringstream os;
  for (const auto& e : report.entries) os << format_entry(e) << '\n';
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu checks, %zu failed, %.2f s\n", report.entries.size(),
                report.failures(), report.seconds);
  os << buf;
  std::cout << os.str();
  if (!out.empty()) write_text(out, os.str());
  if (!report.all_passed()) {
    for (const auto& e : report.entries) {
      if (e.status == CheckStatus::kFail) {
        std::cerr << "gradcheck FAILED: " << e.name << " (" << e.detail << ")\n";
      }
    }
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive image-text pretraining with a momentum teacher and token sparsification"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train from a config file");
  train_cmd->add_option("--config", train.config, "Config JSON")->required();
  train_cmd->add_option("--seed", train.seed, "Override the config seed");
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint directory to resume from");
  train_cmd->add_option("--stop-after-steps", train.stop_after,
                        "Stop (and checkpoint) once this global step is reached");
  train_cmd->add_option("--dump-pairs", train.dump_pairs,
                        "Write the first N training pairs as PNG + JSONL")
      ->default_val(0);
  train_cmd->add_flag("--quiet", train.quiet, "No per-epoch progress lines");

  std::string eval_ckpt, eval_encoder = "student", eval_out;
  std::optional<double> eval_keep;
  auto* eval_cmd = app.add_subcommand("eval", "Zero-shot and retrieval evaluation of a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--encoder", eval_encoder, "student | teacher")
      ->default_val("student")
      ->check(CLI::IsMember({"student", "teacher"}));
  eval_cmd->add_option("--out", eval_out, "Report JSON path");
  eval_cmd->add_option("--keep-rate", eval_keep, "Image-encoder keep rate (default: config)");

  std::string bench_ckpt, bench_config, bench_rates = "1.0,0.9,0.8,0.7,0.6,0.5", bench_out;
  BenchOptions bench_opts;
  auto* bench_cmd = app.add_subcommand("bench", "Forward throughput over keep rates");
  bench_cmd->add_option("--checkpoint", bench_ckpt, "Checkpoint directory");
  bench_cmd->add_option("--config", bench_config, "Config JSON (fresh weights) instead of a checkpoint");
  bench_cmd->add_option("--keep-rates", bench_rates, "Comma-separated keep rates in (0, 1]")
      ->default_val(bench_rates);
  bench_cmd->add_option("--batch", bench_opts.batch, "Images per forward")->default_val(128);
  bench_cmd->add_option("--repeats", bench_opts.repeats, "Timed repeats (>= 20)")->default_val(20);
  bench_cmd->add_option("--warmup", bench_opts.warmup, "Discarded warmup repeats")->default_val(2);
  bench_cmd->add_option("--out", bench_out, "Table JSON path");

  std::string ablate_variants, ablate_config, ablate_out;
  std::optional<std::uint64_t> ablate_seed;
  bool ablate_quiet = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare loss variants");
  ablate_cmd->add_option("--variants", ablate_variants, "Comma-separated variant tags ("
                         + valid_variant_tags() + ")")->required();
  ablate_cmd->add_option("--config", ablate_config, "Shared config JSON")->required();
  ablate_cmd->add_option("--out", ablate_out, "Output directory")->required();
  ablate_cmd->add_option("--seed", ablate_seed, "Override the config seed");
  ablate_cmd->add_flag("--quiet", ablate_quiet, "No progress lines");

  bool break_softmax = false;
  std::string gradcheck_out;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad_cmd->add_flag("--break-softmax-backward", break_softmax,
                     "Mutation test: run with a deliberately wrong softmax backward");
  grad_cmd->add_option("--out", gradcheck_out, "Also write the report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_encoder, eval_out, eval_keep);
    if (*bench_cmd) return cmd_bench(bench_ckpt, bench_config, bench_rates, bench_opts, bench_out);
    if (*ablate_cmd) {
      return cmd_ablate(ablate_variants, ablate_config, ablate_seed, ablate_out, ablate_quiet);
    }
    if (*grad_cmd) return cmd_gradcheck(break_softmax, gradcheck_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
