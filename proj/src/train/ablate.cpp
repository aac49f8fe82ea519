#include "sdclip/ablate.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "sdclip/train.hpp"

namespace sdclip {

namespace {

std::pair<std::string, std::string> matrix_labels(DistillVariant v) {
  switch (v) {
    case DistillVariant::kDualMomentum:
    case DistillVariant::kDualMomentumRamp:
      return {"Tbar·Ibar^T", "T·I^T"};
    case DistillVariant::kTextMomentum:
    case DistillVariant::kTextMomentumRamp:
      return {"T·Ibar^T", "Tbar·I^T"};
    case DistillVariant::kOutputFeature:
      return {"T·Ibar^T", "sg(T)·I^T + feature KD"};
    default:
      return {"T·Ibar^T", "sg(T)·I^T"};
  }
}

std::string lambda_label(const LambdaSchedule& s) {
  char buf[64];
  if (s.kind == LambdaScheduleKind::kConstant) {
    std::snprintf(buf, sizeof buf, "%g", s.start);
  } else {
    std::snprintf(buf, sizeof buf, "%g -> %g", s.start, s.end);
  }
  return buf;
}

std::size_t table_position(DistillVariant v) {
  const auto& all = all_variants();
  return static_cast<std::size_t>(std::find(all.begin(), all.end(), v) - all.begin());
}

}  // namespace

std::vector<AblationRow> run_ablation(const TrainConfig& base,
                                      std::vector<DistillVariant> variants,
                                      const std::filesystem::path& out_dir, bool verbose) {
  if (variants.empty()) throw ConfigError("ablate: no variants given");
  std::sort(variants.begin(), variants.end(),
            [](DistillVariant a, DistillVariant b) { return table_position(a) < table_position(b); });
  variants.erase(std::unique(variants.begin(), variants.end()), variants.end());

  std::vector<TrainConfig> configs;
  for (DistillVariant v : variants) {
    TrainConfig c = base;
    c.variant = v;
    c.teacher_enabled = true;
    c.validate();
    configs.push_back(c);
  }

  std::vector<AblationRow> rows;
  for (const TrainConfig& c : configs) {
    const std::string tag(variant_tag(c.variant));
    if (verbose) std::fprintf(stderr, "ablate: training %s\n", tag.c_str());
    RunOptions opts;
    opts.out_dir = out_dir / tag;
    opts.verbose = verbose;
    RunResult run = run_training(c, opts);
    AblationRow row;
    row.variant = c.variant;
    row.lambda = lambda_label(c.lambda_schedule());
    std::tie(row.teacher_matrix, row.student_matrix) = matrix_labels(c.variant);
    row.text_ema_used = run.state.text_teacher.has_value() && run.state.step > 0;
    row.report = evaluate(run.state, c, EvalEncoder::kStudent, tag);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_markdown(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| variant | lambda | teacher matrix | student matrix | text EMA | T->I R@1 | I->T R@1 | "
        "zero-shot top-1 |\n";
  os << "|---|---|---|---|---|---|---|---|\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %s | %s | %s | %s | %.4f | %.4f | %.4f |\n",
                  std::string(variant_tag(r.variant)).c_str(), r.lambda.c_str(),
                  r.teacher_matrix.c_str(), r.student_matrix.c_str(),
                  r.text_ema_used ? "yes" : "no", r.report.retrieval.text_to_image_r1,
                  r.report.retrieval.image_to_text_r1, r.report.zero_shot_top1);
    os << buf;
  }
  return os.str();
}

nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["variant"] = std::string(variant_tag(r.variant));
    j["lambda"] = r.lambda;
    j["teacher_matrix"] = r.teacher_matrix;
    j["student_matrix"] = r.student_matrix;
    j["text_ema_used"] = r.text_ema_used;
    j["eval"] = to_json(r.report);
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace sdclip
