#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdclip/config.hpp"
#include "sdclip/data.hpp"
#include "sdclip/model.hpp"

namespace sdclip {

struct RetrievalScores {
  double image_to_text_r1 = 0.0, image_to_text_r5 = 0.0, image_to_text_r10 = 0.0;
  double text_to_image_r1 = 0.0, text_to_image_r5 = 0.0, text_to_image_r10 = 0.0;
};

/// Row i of `text` is the true partner of row i of `image`. Candidates are
/// ranked by inner product (cosine for unit rows); a candidate tied with the
/// partner outranks it when its index is lower. Throws ConfigError when there
/// are fewer than 10 candidates.
RetrievalScores retrieval_from_embeddings(const Tensor<float>& text, const Tensor<float>& image);

/// Fraction of images whose highest-scoring prompt (ties to the lower class
/// index) equals `labels[i]`.
double zero_shot_from_embeddings(const Tensor<float>& prompts, const Tensor<float>& images,
                                 const std::vector<std::size_t>& labels);

enum class EvalEncoder { kStudent, kTeacher };
EvalEncoder parse_eval_encoder(const std::string& name);
std::string eval_encoder_name(EvalEncoder e);

struct EvalReport {
  double zero_shot_top1 = 0.0;
  RetrievalScores retrieval;
  double keep_rate = 1.0;
  std::string encoder;
  std::string checkpoint_id;
  std::size_t eval_pairs = 0;
};

nlohmann::ordered_json to_json(const EvalReport& report);

/// Image embeddings of `images` from the chosen encoder at `keep_rate`,
/// computed in chunks without a tape. The teacher requires a model trained
/// with teacher_enabled.
Tensor<float> embed_images(const ModelState& state, EvalEncoder encoder, const Images& images,
                           double keep_rate);
Tensor<float> embed_texts(const ModelState& state, std::span<const std::int32_t> tokens,
                          std::size_t count);

/// Zero-shot top-1 over the kNumClasses shape×color prompts and retrieval
/// over the aligned eval corpus. `keep_rate` < 0 uses the config's κ.
EvalReport evaluate(const ModelState& state, const TrainConfig& config, EvalEncoder encoder,
                    const std::string& checkpoint_id, double keep_rate = -1.0);

struct BenchRow {
  double keep_rate = 1.0;
  double median_ms = 0.0;
  double images_per_second = 0.0;
  double speedup = 1.0;  // vs κ = 1
};

struct BenchOptions {
  std::size_t batch = 128;
  std::size_t repeats = 20;
  std::size_t warmup = 2;
  std::uint64_t seed = 0;
};

/// Forward-only online-encoder timing. Keep rates are visited round-robin on
/// every repeat so drift in machine load spreads evenly. κ = 1 is always
/// timed as the speedup reference. Throws ConfigError when repeats < 20 or
/// a keep rate lies outside (0, 1].
std::vector<BenchRow> throughput_bench(const VisionTransformer<float>& encoder,
                                       const std::vector<double>& keep_rates,
                                       const BenchOptions& options);

// True when img/s strictly increases along decreasing κ.
bool bench_is_monotone(std::vector<BenchRow> rows);

nlohmann::ordered_json bench_json(const std::vector<BenchRow>& rows, const BenchOptions& options);

}  // namespace sdclip
