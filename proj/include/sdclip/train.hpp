#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sdclip/config.hpp"
#include "sdclip/data.hpp"
#include "sdclip/model.hpp"

namespace sdclip {

/// One row of metrics.csv. Losses are the values before the update. When the
/// teacher branch is disabled, clip_teacher_loss and distill_loss are 0.
struct MetricsRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double total_loss = 0.0;
  double clip_teacher_loss = 0.0;
  double clip_student_loss = 0.0;
  double distill_loss = 0.0;
  double tau = 0.0;
  double lambda = 0.0;
  double lr = 0.0;
  // Mean softmax probability (rows of A/τ) of the true partner, aligned pairs only.
  double diag_mass = 0.0;
  // Not written to metrics.csv, which must be reproducible byte for byte.
  double wall_ms = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,epoch,total_loss,clip_teacher_loss,clip_student_loss,distill_loss,tau,lambda,lr,"
    "diag_mass";

std::string metrics_csv_line(const MetricsRow& row);

/// L2 norm of the gradient accumulated in each parameter group after the
/// backward pass. Groups that hold no gradient at all report nullopt.
struct GradNorms {
  std::optional<double> text;
  std::optional<double> image;
  std::optional<double> log_tau;
  std::optional<double> image_teacher;
  std::optional<double> text_teacher;
};

GradNorms gradient_norms(const ModelState& state);

struct StepOptions {
  // Where the matrices go when a loss turns non-finite. Empty = no file.
  std::filesystem::path dump_dir;
  // Skip the parameter update (forward, backward, no optimizer/EMA/center).
  bool dry_run = false;
};

struct StepResult {
  MetricsRow metrics;
  GradNorms grad_norms;
};

/// Loss graph of one step, built on the active tape: shared text forward,
/// sparsified online image forward, teacher forwards without a tape (centered
/// when enabled), variant matrices and loss terms. Without a teacher branch
/// only `total`, `clip_student` and `student_logits` are set.
struct StepForward {
  Tensor<float> total;
  Tensor<float> clip_student;
  std::optional<Tensor<float>> clip_teacher;
  std::optional<Tensor<float>> distill;
  Tensor<float> tau;
  Tensor<float> student_logits;
  Tensor<float> raw_teacher;  // teacher image projections before centering and normalization
  std::vector<std::pair<std::string, Tensor<float>>> matrices;
};

StepForward step_forward(const PairBatch& batch, const ModelState& state,
                         const TrainConfig& config, double lambda);

/// One optimization step: shared text forward, sparsified online image
/// forward, full teacher forward without a tape, variant matrices, loss,
/// backward, AdamW, τ clamp, EMA, center update.
/// Throws NonFiniteLossError (after writing the dump) on a non-finite loss.
StepResult train_step(const PairBatch& batch, ModelState& state, const TrainConfig& config,
                      double lambda, const StepOptions& options = {});

/// Deterministic corpus streams derived from the config seed.
Corpus train_corpus(const TrainConfig& config);
Corpus eval_corpus(const TrainConfig& config);

/// Pair indices of batch `step_in_epoch` of `epoch` (fixed per-epoch shuffle,
/// last partial batch dropped).
std::vector<std::size_t> batch_indices(const TrainConfig& config, std::size_t epoch,
                                       std::size_t step_in_epoch);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume_from;
  // Stop once the global step counter reaches this value.
  std::optional<std::size_t> stop_after_steps;
  bool write_files = true;
  // Print one progress line per epoch to stderr.
  bool verbose = false;
};

struct RunResult {
  ModelState state;
  std::vector<MetricsRow> metrics;  // rows produced by this invocation
  std::filesystem::path final_checkpoint;
};

/// Runs epochs × steps_per_epoch train steps (or resumes a checkpoint and
/// continues). Writes out_dir/metrics.csv, out_dir/timing.csv,
/// out_dir/checkpoints/step_XXXXXXX every checkpoint_every epochs and
/// out_dir/final at the end.
RunResult run_training(const TrainConfig& config, const RunOptions& options);

}  // namespace sdclip
