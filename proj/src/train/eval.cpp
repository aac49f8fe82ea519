#include "sdclip/eval.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>

#include "sdclip/train.hpp"

namespace sdclip {

namespace {

constexpr std::size_t kEvalChunk = 250;

// Position of candidate `truth` in row `r` of a score matrix.
std::size_t rank_of(const std::vector<float>& scores, std::size_t n, std::size_t r,
                    std::size_t truth, bool transposed) {
  auto at = [&](std::size_t j) { return transposed ? scores[j * n + r] : scores[r * n + j]; };
  const float target = at(truth);
  std::size_t rank = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const float v = at(j);
    if (v > target || (v == target && j < truth)) ++rank;
  }
  return rank;
}

Images slice_images(const Images& images, std::size_t begin, std::size_t end) {
  Images out{end - begin, images.size, images.channels, {}};
  const auto ppi = images.pixels_per_image();
  out.pixels.assign(images.pixels.begin() + static_cast<std::ptrdiff_t>(begin * ppi),
                    images.pixels.begin() + static_cast<std::ptrdiff_t>(end * ppi));
  return out;
}

Tensor<float> stack(const std::vector<Tensor<float>>& parts, std::size_t cols) {
  std::vector<float> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    data.insert(data.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return Tensor<float>::from({rows, cols}, std::move(data));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

RetrievalScores retrieval_from_embeddings(const Tensor<float>& text, const Tensor<float>& image) {
  if (text.rows() != image.rows() || text.cols() != image.cols()) {
    throw DimensionError("retrieval: text " + shape_str(text.shape()) + " vs image " +
                         shape_str(image.shape()));
  }
  const std::size_t n = text.rows();
  if (n < 10) {
    throw ConfigError("retrieval: R@10 needs at least 10 candidates, got " + std::to_string(n));
  }
  NoGradScope<float> no_grad;
  const Tensor<float> sim = matmul_nt(text, image);  // rows: text, cols: image
  const std::vector<float> s(sim.data().begin(), sim.data().end());
  std::array<std::size_t, 3> t2i{}, i2t{};
  constexpr std::array<std::size_t, 3> ks{1, 5, 10};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t rt = rank_of(s, n, i, i, false);
    const std::size_t ri = rank_of(s, n, i, i, true);
    for (std::size_t k = 0; k < 3; ++k) {
      t2i[k] += rt < ks[k];
      i2t[k] += ri < ks[k];
    }
  }
  const double dn = static_cast<double>(n);
  return {i2t[0] / dn, i2t[1] / dn, i2t[2] / dn, t2i[0] / dn, t2i[1] / dn, t2i[2] / dn};
}

double zero_shot_from_embeddings(const Tensor<float>& prompts, const Tensor<float>& images,
                                 const std::vector<std::size_t>& labels) {
  if (labels.size() != images.rows()) {
    throw DimensionError("zero_shot: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(images.rows()) + " images");
  }
  if (images.rows() == 0) return 0.0;
  NoGradScope<float> no_grad;
  const Tensor<float> sim = matmul_nt(images, prompts);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < sim.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < sim.cols(); ++c) {
      if (sim.at(i, c) > sim.at(i, best)) best = c;
    }
    correct += best == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(images.rows());
}

EvalEncoder parse_eval_encoder(const std::string& name) {
  if (name == "student") return EvalEncoder::kStudent;
  if (name == "teacher") return EvalEncoder::kTeacher;
  throw ConfigError("unknown encoder '" + name + "' (valid: student, teacher)");
}

std::string eval_encoder_name(EvalEncoder e) {
  return e == EvalEncoder::kStudent ? "student" : "teacher";
}

nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["checkpoint_id"] = r.checkpoint_id;
  j["encoder"] = r.encoder;
  j["keep_rate"] = r.keep_rate;
  j["eval_pairs"] = r.eval_pairs;
  j["zero_shot_top1"] = r.zero_shot_top1;
  j["image_to_text"] = {{"R@1", r.retrieval.image_to_text_r1},
                        {"R@5", r.retrieval.image_to_text_r5},
                        {"R@10", r.retrieval.image_to_text_r10}};
  j["text_to_image"] = {{"R@1", r.retrieval.text_to_image_r1},
                        {"R@5", r.retrieval.text_to_image_r5},
                        {"R@10", r.retrieval.text_to_image_r10}};
  return j;
}

Tensor<float> embed_images(const ModelState& state, EvalEncoder encoder, const Images& images,
                           double keep_rate) {
  const VisionTransformer<float>* net = &state.image;
  if (encoder == EvalEncoder::kTeacher) {
    if (!state.image_teacher) {
      throw ConfigError("checkpoint has no teacher encoder (trained with teacher_enabled=false)");
    }
    net = &*state.image_teacher;
  }
  NoGradScope<float> no_grad;
  std::vector<Tensor<float>> parts;
  for (std::size_t b = 0; b < images.count; b += kEvalChunk) {
    const std::size_t e = std::min(images.count, b + kEvalChunk);
    parts.push_back(net->forward(slice_images(images, b, e), keep_rate).embeddings);
  }
  return stack(parts, net->config().proj_dim);
}

Tensor<float> embed_texts(const ModelState& state, std::span<const std::int32_t> tokens,
                          std::size_t count) {
  NoGradScope<float> no_grad;
  const std::size_t len = count ? tokens.size() / count : 0;
  std::vector<Tensor<float>> parts;
  for (std::size_t b = 0; b < count; b += kEvalChunk) {
    const std::size_t e = std::min(count, b + kEvalChunk);
    parts.push_back(state.text.forward(tokens.subspan(b * len, (e - b) * len), e - b));
  }
  return stack(parts, state.text.config().proj_dim);
}

EvalReport evaluate(const ModelState& state, const TrainConfig& config, EvalEncoder encoder,
                    const std::string& checkpoint_id, double keep_rate) {
  const double kappa = keep_rate < 0 ? config.vit.keep_rate : keep_rate;
  const Corpus corpus = eval_corpus(config);
  const PairBatch batch = corpus.materialize_all(config.vit.image_size, config.text.max_len);

  const Tensor<float> image_emb = embed_images(state, encoder, batch.images, kappa);
  const Tensor<float> text_emb = embed_texts(state, batch.tokens, batch.size());

  std::vector<std::int32_t> prompt_tokens;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const auto row = tokenize(class_prompt(c), config.text.max_len);
    prompt_tokens.insert(prompt_tokens.end(), row.begin(), row.end());
  }
  const Tensor<float> prompt_emb = embed_texts(state, prompt_tokens, kNumClasses);
  std::vector<std::size_t> labels;
  for (const auto& spec : batch.specs) labels.push_back(spec.class_index());

  EvalReport report;
  report.zero_shot_top1 = zero_shot_from_embeddings(prompt_emb, image_emb, labels);
  report.retrieval = retrieval_from_embeddings(text_emb, image_emb);
  report.keep_rate = kappa;
  report.encoder = eval_encoder_name(encoder);
  report.checkpoint_id = checkpoint_id;
  report.eval_pairs = batch.size();
  return report;
}

std::vector<BenchRow> throughput_bench(const VisionTransformer<float>& encoder,
                                       const std::vector<double>& keep_rates,
                                       const BenchOptions& options) {
  if (options.repeats < 20) {
    throw ConfigError("bench: repeats must be at least 20, got " + std::to_string(options.repeats));
  }
  if (keep_rates.empty()) throw ConfigError("bench: no keep rates given");
  for (double k : keep_rates) {
    if (!(k > 0.0 && k <= 1.0)) {
      throw ConfigError("bench: keep rate " + std::to_string(k) + " outside (0, 1]");
    }
  }
  std::vector<double> timed = keep_rates;
  if (std::find(timed.begin(), timed.end(), 1.0) == timed.end()) timed.push_back(1.0);

  const PairBatch batch = make_batch(options.seed, options.batch, 0.0, encoder.config().image_size, 16);
  NoGradScope<float> no_grad;
  std::vector<std::vector<double>> samples(timed.size());
  for (std::size_t rep = 0; rep < options.warmup + options.repeats; ++rep) {
    for (std::size_t i = 0; i < timed.size(); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = encoder.forward(batch.images, timed[i]);
      const auto t1 = std::chrono::steady_clock::now();
      if (rep >= options.warmup) {
        samples[i].push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
    }
  }
  const std::size_t ref = static_cast<std::size_t>(
      std::find(timed.begin(), timed.end(), 1.0) - timed.begin());
  const double ref_ips = 1000.0 * static_cast<double>(options.batch) / median(samples[ref]);
  std::vector<BenchRow> rows;
  for (std::size_t i = 0; i < keep_rates.size(); ++i) {
    BenchRow row;
    row.keep_rate = keep_rates[i];
    row.median_ms = median(samples[i]);
    row.images_per_second = 1000.0 * static_cast<double>(options.batch) / row.median_ms;
    row.speedup = keep_rates[i] == 1.0 ? 1.0 : row.images_per_second / ref_ips;
    rows.push_back(row);
  }
  return rows;
}

bool bench_is_monotone(std::vector<BenchRow> rows) {
  std::sort(rows.begin(), rows.end(),
            [](const BenchRow& a, const BenchRow& b) { return a.keep_rate > b.keep_rate; });
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (!(rows[i].images_per_second > rows[i - 1].images_per_second)) return false;
  }
  return true;
}

nlohmann::ordered_json bench_json(const std::vector<BenchRow>& rows, const BenchOptions& options) {
  nlohmann::ordered_json j;
  j["batch"] = options.batch;
  j["repeats"] = options.repeats;
  j["warmup"] = options.warmup;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"keep_rate", r.keep_rate},
                         {"median_ms", r.median_ms},
                         {"images_per_second", r.images_per_second},
                         {"speedup", r.speedup}});
  }
  j["monotone"] = bench_is_monotone(rows);
  return j;
}

}  // namespace sdclip
