#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdclip/config.hpp"
#include "sdclip/eval.hpp"

namespace sdclip {

struct AblationRow {
  DistillVariant variant = DistillVariant::kEclipse;
  std::string lambda;           // "0.5" or "0.5 -> 1"
  std::string teacher_matrix;   // e.g. "T·Ībᵀ"
  std::string student_matrix;
  bool text_ema_used = false;   // a text momentum encoder was built and updated
  EvalReport report;            // student encoder
};

/// Validates every variant against `base` before any training starts (a
/// text-momentum variant without ema.text_ema fails here), then trains and
/// evaluates each variant with the shared config. Rows follow the ablation
/// table order regardless of the order requested. Each run lands in
/// out_dir/<tag>/.
std::vector<AblationRow> run_ablation(const TrainConfig& base,
                                      std::vector<DistillVariant> variants,
                                      const std::filesystem::path& out_dir, bool verbose = false);

std::string ablation_markdown(const std::vector<AblationRow>& rows);
nlohmann::ordered_json ablation_json(const std::vector<AblationRow>& rows);

}  // namespace sdclip
