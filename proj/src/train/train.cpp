#include "sdclip/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sdclip/checkpoint.hpp"
#include "sdclip/losses.hpp"
#include "sdclip/ops.hpp"
#include "sdclip/rng.hpp"

namespace sdclip {

namespace {

constexpr std::uint64_t kTrainCorpusStream = 0x7472'6169'6eULL;
constexpr std::uint64_t kEvalCorpusStream = 0x6576'616cULL;
constexpr std::uint64_t kShuffleStream = 0x7368'7566ULL;

std::optional<double> group_norm(const ParamList<float>& params) {
  bool any = false;
  double acc = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    any = true;
    for (float g : p.tensor.grad()) acc += static_cast<double>(g) * g;
  }
  if (!any) return std::nullopt;
  return std::sqrt(acc);
}

nlohmann::json matrix_json(const Tensor<float>& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t c = 0; c < t.cols(); ++c) {
      const float v = t.at(r, c);
      if (std::isfinite(v)) {
        row.push_back(v);
      } else {
        row.push_back(std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf"));
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

[[noreturn]] void abort_non_finite(const ModelState& state, const StepOptions& options,
                                   const std::string& what,
                                   const std::vector<std::pair<std::string, Tensor<float>>>& mats) {
  std::ostringstream msg;
  msg << "non-finite " << what << " at step " << state.step << " (tau=" << state.tau() << ")";
  if (!options.dump_dir.empty()) {
    nlohmann::json dump;
    dump["step"] = state.step;
    dump["tau"] = state.tau();
    dump["term"] = what;
    for (const auto& [name, m] : mats) dump["matrices"][name] = matrix_json(m);
    std::filesystem::create_directories(options.dump_dir);
    const auto path = options.dump_dir / "nonfinite_dump.json";
    std::ofstream(path) << dump.dump(1) << '\n';
    msg << "; matrices written to " << path.string();
  }
  throw NonFiniteLossError(msg.str());
}

double diag_mass(const Tensor<float>& logits, double tau, const std::vector<bool>& misaligned) {
  const std::size_t n = logits.rows();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < misaligned.size() && misaligned[i]) continue;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, logits.at(i, j) / tau);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(logits.at(i, j) / tau - mx);
    total += std::exp(logits.at(i, i) / tau - mx) / z;
    ++count;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

}  // namespace

std::string metrics_csv_line(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", r.step,
                r.epoch, r.total_loss, r.clip_teacher_loss, r.clip_student_loss, r.distill_loss,
                r.tau, r.lambda, r.lr, r.diag_mass);
  return buf;
}

GradNorms gradient_norms(const ModelState& state) {
  GradNorms g;
  g.text = group_norm(state.text.parameters());
  g.image = group_norm(state.image.parameters());
  g.log_tau = group_norm({{"log_tau", state.log_tau}});
  if (state.image_teacher) g.image_teacher = group_norm(state.image_teacher->parameters());
  if (state.text_teacher) g.text_teacher = group_norm(state.text_teacher->parameters());
  return g;
}

StepForward step_forward(const PairBatch& batch, const ModelState& state,
                         const TrainConfig& config, double lambda) {
  if (batch.size() < 2) throw ConfigError("train step: batch needs at least 2 pairs");
  if (config.teacher_enabled && !state.image_teacher) {
    throw ContractError("train step: teacher enabled but model has no image teacher");
  }
  StepForward f;
  const Tensor<float> text = state.text.forward(batch.tokens, batch.size());
  const Tensor<float> image = state.image.forward(batch.images, config.vit.keep_rate).embeddings;
  f.tau = exp(state.log_tau);

  if (!config.teacher_enabled) {
    const AlignmentMatrix<float> a = alignment_matrix(text, image);
    f.total = f.clip_student = clip_loss(a.values, f.tau);
    f.student_logits = a.values;
    f.matrices = {{"alignment", a.values}};
    return f;
  }
  Tensor<float> teacher_image;
  std::optional<Tensor<float>> text_teacher;
  {
    NoGradScope<float> no_grad;
    const EncoderOutput<float> teacher_out = state.image_teacher->forward(batch.images, 1.0, false);
    f.raw_teacher = teacher_out.projections;
    teacher_image = config.ema.centering ? state.center.apply(f.raw_teacher) : teacher_out.embeddings;
    if (state.text_teacher) text_teacher = state.text_teacher->forward(batch.tokens, batch.size());
  }
  const auto mats = build_variant_matrices(config.variant, text, text_teacher, image, teacher_image);
  const LossTerms<float> terms = total_loss(mats, f.tau, lambda);
  f.total = terms.total;
  f.clip_student = terms.clip_student;
  f.clip_teacher = terms.clip_teacher;
  f.distill = terms.distill;
  f.student_logits = mats.student.values;
  f.matrices = {{"teacher_alignment", mats.teacher.values},
                {"student_alignment", mats.student.values}};
  return f;
}

StepResult train_step(const PairBatch& batch, ModelState& state, const TrainConfig& config,
                      double lambda, const StepOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const ParamList<float> trainable = state.trainable();
  for (const auto& p : trainable) Tensor<float>(p.tensor).zero_grad();

  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  const StepForward f = step_forward(batch, state, config, lambda);

  MetricsRow row;
  row.step = state.step;
  row.lambda = lambda;
  row.tau = f.tau.item();
  row.total_loss = f.total.item();
  row.clip_student_loss = f.clip_student.item();
  if (f.clip_teacher) row.clip_teacher_loss = f.clip_teacher->item();
  if (f.distill) row.distill_loss = f.distill->item();
  row.diag_mass = diag_mass(f.student_logits, row.tau, batch.misaligned);

  for (double v : {row.total_loss, row.clip_teacher_loss, row.clip_student_loss, row.distill_loss}) {
    if (!std::isfinite(v)) abort_non_finite(state, options, "loss", f.matrices);
  }

  tape.backward(f.total);

  StepResult result;
  result.grad_norms = gradient_norms(state);
  const double lr = learning_rate_at(state.step, config.total_steps(), config.optim);
  row.lr = lr;
  if (!options.dry_run) {
    state.optimizer.step(trainable, config.optim, lr);
    float& log_tau = state.log_tau.mutable_data()[0];
    log_tau = std::clamp(log_tau, static_cast<float>(std::log(config.tau_min)),
                         static_cast<float>(std::log(config.tau_max)));
    if (state.image_teacher) {
      ema_update(state.image_teacher->parameters(), state.image.parameters(), config.ema.momentum);
    }
    if (state.text_teacher) {
      ema_update(state.text_teacher->parameters(), state.text.parameters(), config.ema.momentum);
    }
    if (config.teacher_enabled && config.ema.centering) {
      state.center.update(f.raw_teacher, config.ema.center_momentum);
    }
    ++state.step;
  }
  row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  result.metrics = row;
  return result;
}

Corpus train_corpus(const TrainConfig& config) {
  return Corpus(derive_seed(config.seed, {kTrainCorpusStream}), config.corpus.train_size,
                config.corpus.misalignment);
}

Corpus eval_corpus(const TrainConfig& config) {
  return Corpus(derive_seed(config.seed, {kEvalCorpusStream}), config.corpus.eval_size, 0.0);
}

std::vector<std::size_t> batch_indices(const TrainConfig& config, std::size_t epoch,
                                       std::size_t step_in_epoch) {
  std::vector<std::size_t> order(config.corpus.train_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(config.seed, {kShuffleStream, epoch}));
  rng.shuffle(order.begin(), order.end());
  const std::size_t begin = step_in_epoch * config.batch_size;
  if (begin + config.batch_size > order.size()) {
    throw ContractError("batch_indices: step " + std::to_string(step_in_epoch) +
                        " past the end of the epoch");
  }
  return {order.begin() + static_cast<std::ptrdiff_t>(begin),
          order.begin() + static_cast<std::ptrdiff_t>(begin + config.batch_size)};
}

namespace {

std::string step_dir_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%07zu", step);
  return buf;
}

// Keeps rows of an existing metrics file whose step precedes `step`.
void truncate_csv(const std::filesystem::path& path, std::size_t step) {
  if (!std::filesystem::exists(path)) return;
  std::ifstream in(path);
  std::string header, line, kept;
  std::getline(in, header);
  kept = header + "\n";
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) < step) kept += line + "\n";
  }
  in.close();
  std::ofstream(path, std::ios::trunc) << kept;
}

}  // namespace

RunResult run_training(const TrainConfig& config, const RunOptions& options) {
  config.validate();
  const std::size_t spe = config.steps_per_epoch();
  const std::size_t total = config.total_steps();

  std::optional<ModelState> state;
  if (options.resume_from) {
    LoadedCheckpoint ck = load_checkpoint(*options.resume_from);
    if (to_json(ck.config) != to_json(config)) {
      throw ConfigError("resume: checkpoint " + options.resume_from->string() +
                        " was written with a different config");
    }
    state.emplace(std::move(ck.state));
  } else {
    state.emplace(init_model(config));
  }
  const std::size_t stop = std::min(total, options.stop_after_steps.value_or(total));

  const auto metrics_path = options.out_dir / "metrics.csv";
  const auto timing_path = options.out_dir / "timing.csv";
  std::ofstream metrics_out, timing_out;
  if (options.write_files) {
    std::filesystem::create_directories(options.out_dir);
    if (options.resume_from) {
      truncate_csv(metrics_path, state->step);
      truncate_csv(timing_path, state->step);
    }
    const bool fresh = !std::filesystem::exists(metrics_path) || !options.resume_from;
    metrics_out.open(metrics_path, fresh ? std::ios::trunc : std::ios::app);
    timing_out.open(timing_path, fresh ? std::ios::trunc : std::ios::app);
    if (fresh) {
      metrics_out << kMetricsHeader << '\n';
      timing_out << "step,wall_ms\n";
    }
  }

  const Corpus corpus = train_corpus(config);
  const LambdaSchedule schedule = config.lambda_schedule();
  RunResult result{std::move(*state), {}, {}};
  ModelState& s = result.state;
  StepOptions step_options;
  if (options.write_files) step_options.dump_dir = options.out_dir;

  auto save = [&](const std::filesystem::path& dir) {
    if (options.write_files) save_checkpoint(dir, config, s);
  };

  while (s.step < stop) {
    const std::size_t epoch = s.step / spe;
    const std::size_t in_epoch = s.step % spe;
    const double lambda = schedule.at(epoch, config.epochs);
    const auto indices = batch_indices(config, epoch, in_epoch);
    const PairBatch batch = corpus.materialize(indices, config.vit.image_size, config.text.max_len);
    StepResult r = train_step(batch, s, config, lambda, step_options);
    r.metrics.epoch = epoch;
    if (options.write_files) {
      metrics_out << metrics_csv_line(r.metrics) << '\n';
      timing_out << r.metrics.step << ',' << r.metrics.wall_ms << '\n';
    }
    result.metrics.push_back(r.metrics);
    if (s.step % spe == 0) {
      const std::size_t done = s.step / spe;
      if (options.verbose) {
        std::cerr << "epoch " << done << "/" << config.epochs << "  step " << s.step
                  << "  loss " << r.metrics.total_loss << "  tau " << r.metrics.tau << '\n';
      }
      if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && s.step < stop) {
        metrics_out.flush();
        save(options.out_dir / "checkpoints" / step_dir_name(s.step));
      }
    }
  }
  metrics_out.flush();
  timing_out.flush();
  result.final_checkpoint = options.out_dir / "final";
  save(result.final_checkpoint);
  return result;
}

}  // namespace sdclip
