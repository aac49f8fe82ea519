#include "sdclip/losses.hpp"

#include <algorithm>
#include <array>

namespace sdclip {

template <typename T>
AlignmentMatrix<T> alignment_matrix(const Tensor<T>& text, const Tensor<T>& image,
                                    std::string row_source, std::string col_source) {
  if (text.rows() != image.rows()) {
    throw ContractError("alignment_matrix: " + std::to_string(text.rows()) + " texts vs " +
                        std::to_string(image.rows()) + " images");
  }
  if (text.cols() != image.cols()) {
    throw DimensionError("alignment_matrix: embedding widths differ " +
                         shape_str(text.shape()) + " vs " + shape_str(image.shape()));
  }
  return {matmul_nt(text, image), std::move(row_source), std::move(col_source)};
}

template <typename T>
Tensor<T> info_nce(const Tensor<T>& logits, const Tensor<T>& tau) {
  if (tau.item() <= T(0)) throw ContractError("info_nce: temperature must be positive");
  return scale(mean(diagonal(log_softmax_rows(div_scalar(logits, tau)))), -1.0);
}

template <typename T>
Tensor<T> info_nce(const Tensor<T>& logits, double tau) {
  return info_nce(logits, Tensor<T>::scalar(static_cast<T>(tau)));
}

template <typename T>
Tensor<T> clip_loss(const Tensor<T>& logits, const Tensor<T>& tau) {
  return scale(add(info_nce(logits, tau), info_nce(transpose(logits), tau)), 0.5);
}

template <typename T>
Tensor<T> clip_loss(const Tensor<T>& logits, double tau) {
  return clip_loss(logits, Tensor<T>::scalar(static_cast<T>(tau)));
}

template <typename T>
Tensor<T> kl_rows(const Tensor<T>& target, const Tensor<T>& pred, double tau_d) {
  if (target.shape() != pred.shape()) {
    throw DimensionError("kl_rows: shape mismatch " + shape_str(target.shape()) + " vs " +
                         shape_str(pred.shape()));
  }
  const double inv = 1.0 / tau_d;
  const Tensor<T> target_logits = scale(stop_gradient(target), inv);
  const Tensor<T> p = softmax_rows(target_logits);
  const Tensor<T> log_p = log_softmax_rows(target_logits);
  const Tensor<T> log_q = log_softmax_rows(scale(pred, inv));
  return scale(sum(mul(p, sub(log_p, log_q))), 1.0 / static_cast<double>(target.rows()));
}

template <typename T>
Tensor<T> distill_loss(const Tensor<T>& teacher, const Tensor<T>& student, double tau_d) {
  return scale(add(kl_rows(teacher, student, tau_d),
                   kl_rows(transpose(stop_gradient(teacher)), transpose(student), tau_d)),
               0.5);
}

template <typename T>
Tensor<T> feature_distill_loss(const Tensor<T>& teacher_features,
                               const Tensor<T>& student_features) {
  if (teacher_features.shape() != student_features.shape()) {
    throw DimensionError("feature_distill_loss: shape mismatch " +
                         shape_str(teacher_features.shape()) + " vs " +
                         shape_str(student_features.shape()));
  }
  // mean over rows of (1 − ⟨I_j, Ī_j⟩) = 1 − Σ(I∘Ī)/N
  const Tensor<T> cos_sum = sum(mul(student_features, stop_gradient(teacher_features)));
  const auto n = static_cast<double>(student_features.rows());
  Tensor<T> one = Tensor<T>::scalar(T(1));
  return sub(one, scale(cos_sum, 1.0 / n));
}

double LambdaSchedule::at(std::size_t epoch, std::size_t total_epochs) const {
  if (kind == LambdaScheduleKind::kConstant || total_epochs <= 1) return start;
  const double t = static_cast<double>(std::min(epoch, total_epochs - 1)) /
                   static_cast<double>(total_epochs - 1);
  return std::clamp(start + (end - start) * t, 0.0, 1.0);
}

namespace {
struct VariantInfo {
  DistillVariant variant;
  std::string_view tag;
};
constexpr std::array<VariantInfo, 8> kVariants{{
    {DistillVariant::kEclipse, "eclipse"},
    {DistillVariant::kHardOnly, "hard_only"},
    {DistillVariant::kEclipseRamp, "eclipse_ramp"},
    {DistillVariant::kOutputFeature, "output_feature"},
    {DistillVariant::kDualMomentum, "dual_momentum"},
    {DistillVariant::kDualMomentumRamp, "dual_momentum_ramp"},
    {DistillVariant::kTextMomentum, "text_momentum"},
    {DistillVariant::kTextMomentumRamp, "text_momentum_ramp"},
}};
}  // namespace

const std::vector<DistillVariant>& all_variants() {
  static const std::vector<DistillVariant> variants = [] {
    std::vector<DistillVariant> v;
    for (const auto& info : kVariants) v.push_back(info.variant);
    return v;
  }();
  return variants;
}

std::string_view variant_tag(DistillVariant v) {
  for (const auto& info : kVariants) {
    if (info.variant == v) return info.tag;
  }
  return "unknown";
}

std::string valid_variant_tags() {
  std::string out;
  for (const auto& info : kVariants) {
    if (!out.empty()) out += ", ";
    out += info.tag;
  }
  return out;
}

DistillVariant parse_variant(std::string_view tag) {
  for (const auto& info : kVariants) {
    if (info.tag == tag) return info.variant;
  }
  throw ConfigError("unknown variant '" + std::string(tag) + "'; valid tags: " +
                    valid_variant_tags());
}

bool variant_needs_text_teacher(DistillVariant v) {
  switch (v) {
    case DistillVariant::kDualMomentum:
    case DistillVariant::kDualMomentumRamp:
    case DistillVariant::kTextMomentum:
    case DistillVariant::kTextMomentumRamp:
      return true;
    default:
      return false;
  }
}

bool variant_uses_feature_distill(DistillVariant v) {
  return v == DistillVariant::kOutputFeature;
}

LambdaSchedule variant_lambda_schedule(DistillVariant v, double lambda, double ramp_start,
                                       double ramp_end) {
  switch (v) {
    case DistillVariant::kHardOnly:
      return LambdaSchedule::constant(1.0);
    case DistillVariant::kEclipseRamp:
    case DistillVariant::kDualMomentumRamp:
    case DistillVariant::kTextMomentumRamp:
      return LambdaSchedule::linear_ramp(ramp_start, ramp_end);
    default:
      return LambdaSchedule::constant(lambda);
  }
}

template <typename T>
VariantMatrices<T> build_variant_matrices(DistillVariant variant, const Tensor<T>& text,
                                          const std::optional<Tensor<T>>& text_teacher,
                                          const Tensor<T>& image,
                                          const Tensor<T>& image_teacher) {
  VariantMatrices<T> m;
  if (variant_needs_text_teacher(variant) && !text_teacher) {
    throw ConfigError("variant " + std::string(variant_tag(variant)) +
                      " needs the text momentum encoder; enable ema.text_ema");
  }
  switch (variant) {
    case DistillVariant::kDualMomentum:
    case DistillVariant::kDualMomentumRamp:
      m.teacher = alignment_matrix(*text_teacher, image_teacher, "text_teacher", "image_teacher");
      m.student = alignment_matrix(text, image, "text", "image");
      break;
    case DistillVariant::kTextMomentum:
    case DistillVariant::kTextMomentumRamp:
      m.teacher = alignment_matrix(text, image_teacher, "text", "image_teacher");
      m.student = alignment_matrix(*text_teacher, image, "text_teacher", "image");
      break;
    default:
      m.teacher = alignment_matrix(text, image_teacher, "text", "image_teacher");
      m.student = alignment_matrix(stop_gradient(text), image, "sg(text)", "image");
      break;
  }
  if (variant_uses_feature_distill(variant)) {
    m.feature_distill = true;
    m.image = image;
    m.image_teacher = image_teacher;
  }
  return m;
}

template <typename T>
LossTerms<T> online_loss(const VariantMatrices<T>& m, const Tensor<T>& tau, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ContractError("online_loss: lambda " + std::to_string(lambda) + " outside [0, 1]");
  }
  LossTerms<T> terms;
  terms.clip_student = clip_loss(m.student.values, tau);
  if (m.feature_distill) {
    terms.distill = feature_distill_loss(*m.image_teacher, *m.image);
  } else {
    terms.distill = distill_loss(m.teacher.values, m.student.values,
                                 static_cast<double>(stop_gradient(tau).item()));
  }
  if (lambda == 1.0) {
    terms.online = terms.clip_student;
  } else if (lambda == 0.0) {
    terms.online = terms.distill;
  } else {
    terms.online = add(scale(terms.clip_student, lambda), scale(terms.distill, 1.0 - lambda));
  }
  return terms;
}

template <typename T>
LossTerms<T> total_loss(const VariantMatrices<T>& m, const Tensor<T>& tau, double lambda) {
  LossTerms<T> terms = online_loss(m, tau, lambda);
  terms.clip_teacher = clip_loss(m.teacher.values, tau);
  terms.total = add(terms.online, terms.clip_teacher);
  return terms;
}

#define SDCLIP_INSTANTIATE_LOSSES(T)                                                        \
  template AlignmentMatrix<T> alignment_matrix(const Tensor<T>&, const Tensor<T>&,          \
                                               std::string, std::string);                   \
  template Tensor<T> info_nce(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> info_nce(const Tensor<T>&, double);                                    \
  template Tensor<T> clip_loss(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> clip_loss(const Tensor<T>&, double);                                   \
  template Tensor<T> kl_rows(const Tensor<T>&, const Tensor<T>&, double);                   \
  template Tensor<T> distill_loss(const Tensor<T>&, const Tensor<T>&, double);              \
  template Tensor<T> feature_distill_loss(const Tensor<T>&, const Tensor<T>&);              \
  template VariantMatrices<T> build_variant_matrices(                                       \
      DistillVariant, const Tensor<T>&, const std::optional<Tensor<T>>&, const Tensor<T>&,  \
      const Tensor<T>&);                                                                    \
  template LossTerms<T> online_loss(const VariantMatrices<T>&, const Tensor<T>&, double);   \
  template LossTerms<T> total_loss(const VariantMatrices<T>&, const Tensor<T>&, double);

SDCLIP_INSTANTIATE_LOSSES(float)
SDCLIP_INSTANTIATE_LOSSES(double)

#undef SDCLIP_INSTANTIATE_LOSSES

}  // namespace sdclip
