#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sdclip/ops.hpp"
#include "sdclip/tensor.hpp"

namespace sdclip {

/// N×N cosine similarities between a text batch (rows) and an image batch
/// (columns).
template <typename T>
struct AlignmentMatrix {
  Tensor<T> values;
  std::string row_source;
  std::string col_source;

  std::size_t size() const { return values.rows(); }
};

/// A_ij = ⟨T_i, I_j⟩ for unit-norm embedding rows.
template <typename T>
AlignmentMatrix<T> alignment_matrix(const Tensor<T>& text, const Tensor<T>& image,
                                    std::string row_source = "text",
                                    std::string col_source = "image");

/// −(1/N) Σ_i log softmax_i(A_i / τ)_i, with τ a one-element tensor (may be
/// learnable). Row-wise log-sum-exp keeps it stable.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& logits, const Tensor<T>& tau);
template <typename T>
Tensor<T> info_nce(const Tensor<T>& logits, double tau);

/// ½ (L_N(A) + L_N(Aᵀ)).
template <typename T>
Tensor<T> clip_loss(const Tensor<T>& logits, const Tensor<T>& tau);
template <typename T>
Tensor<T> clip_loss(const Tensor<T>& logits, double tau);

/// (1/N) Σ_i KL(σ(target_i/τ_d) ‖ σ(pred_i/τ_d)), the forward (non-negative)
/// orientation. `target` is a constant: no gradient reaches it. Works on any
/// R×C pair of equal shape.
template <typename T>
Tensor<T> kl_rows(const Tensor<T>& target, const Tensor<T>& pred, double tau_d);

/// ½ (kl_rows(Ā, A) + kl_rows(Āᵀ, Aᵀ)).
template <typename T>
Tensor<T> distill_loss(const Tensor<T>& teacher, const Tensor<T>& student, double tau_d);

/// mean_j (1 − ⟨I_j, sg(Ī_j)⟩): feature-level distillation for unit rows.
template <typename T>
Tensor<T> feature_distill_loss(const Tensor<T>& teacher_features,
                               const Tensor<T>& student_features);

enum class LambdaScheduleKind { kConstant, kLinearRamp };

struct LambdaSchedule {
  LambdaScheduleKind kind = LambdaScheduleKind::kConstant;
  double start = 0.5;
  double end = 0.5;

  static LambdaSchedule constant(double lambda) {
    return {LambdaScheduleKind::kConstant, lambda, lambda};
  }
  static LambdaSchedule linear_ramp(double start, double end) {
    return {LambdaScheduleKind::kLinearRamp, start, end};
  }
  // Linear in epochs: `start` at the first epoch, `end` at the last.
  double at(std::size_t epoch, std::size_t total_epochs) const;
};

/// τ is learned as log τ; after every update it is clamped so that
/// τ ∈ [tau_min, tau_max]. The distillation temperature τ_d follows τ.
struct LossWeights {
  LambdaSchedule schedule = LambdaSchedule::constant(0.5);
  double tau_init = 0.07;
  double tau_min = 0.01;
  double tau_max = 1.0;
};

enum class DistillVariant {
  kEclipse,
  kHardOnly,
  kEclipseRamp,
  kOutputFeature,
  kDualMomentum,
  kDualMomentumRamp,
  kTextMomentum,
  kTextMomentumRamp,
};

// Ordered as the ablation table rows: default, (a) … (g).
const std::vector<DistillVariant>& all_variants();
std::string_view variant_tag(DistillVariant v);
// Throws ConfigError listing valid tags.
DistillVariant parse_variant(std::string_view tag);
std::string valid_variant_tags();
bool variant_needs_text_teacher(DistillVariant v);
bool variant_uses_feature_distill(DistillVariant v);
LambdaSchedule variant_lambda_schedule(DistillVariant v, double lambda, double ramp_start,
                                       double ramp_end);

/// Matrices (Ā, A) for one step. `feature_distill` marks the output-feature
/// form, whose distillation term compares I with Ī instead of the matrices.
template <typename T>
struct VariantMatrices {
  AlignmentMatrix<T> teacher;  // Ā
  AlignmentMatrix<T> student;  // A
  bool feature_distill = false;
  // Set only for the output-feature form.
  std::optional<Tensor<T>> image;          // I
  std::optional<Tensor<T>> image_teacher;  // Ī
};

/// Wires (Ā, A) for a variant:
///   eclipse / hard_only / eclipse_ramp / output_feature: Ā = T·Īᵀ, A = sg(T)·Iᵀ
///   dual_momentum(_ramp):                                Ā = T̄·Īᵀ, A = T·Iᵀ
///   text_momentum(_ramp):                                Ā = T·Īᵀ, A = T̄·Iᵀ
/// `text_teacher` must be set for the last four.
template <typename T>
VariantMatrices<T> build_variant_matrices(DistillVariant variant, const Tensor<T>& text,
                                          const std::optional<Tensor<T>>& text_teacher,
                                          const Tensor<T>& image,
                                          const Tensor<T>& image_teacher);

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> online;
  Tensor<T> clip_student;  // L_CLIP(A)
  Tensor<T> clip_teacher;  // L_CLIP(Ā)
  Tensor<T> distill;
};

/// λ·L_CLIP(A) + (1−λ)·L_distill(Ā, A), with τ_d = sg(τ).
template <typename T>
LossTerms<T> online_loss(const VariantMatrices<T>& m, const Tensor<T>& tau, double lambda);

/// online_loss + L_CLIP(Ā).
template <typename T>
LossTerms<T> total_loss(const VariantMatrices<T>& m, const Tensor<T>& tau, double lambda);

}  // namespace sdclip
