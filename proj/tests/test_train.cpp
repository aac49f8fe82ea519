#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "sdclip/checkpoint.hpp"
#include "sdclip/eval.hpp"
#include "sdclip/rng.hpp"
#include "sdclip/train.hpp"

using namespace sdclip;
namespace fs = std::filesystem;

namespace {
TrainConfig tiny_config() {
  TrainConfig c;
  c.vit.image_size = 16;
  c.vit.patch_size = 4;
  c.vit.depth = 3;
  c.vit.width = 16;
  c.vit.heads = 2;
  c.vit.proj_dim = 8;
  c.vit.keep_rate = 0.7;
  c.vit.sparsify_layers = {1, 2};
  c.text.depth = 1;
  c.text.width = 16;
  c.text.heads = 2;
  c.text.proj_dim = 8;
  c.epochs = 2;
  c.batch_size = 8;
  c.corpus.train_size = 32;
  c.corpus.eval_size = 40;
  c.optim.warmup_steps = 2;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sdclip_unit_" + name);
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

Tensor<float> unit_rows(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<float> v(n * d);
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < d; ++c) {
      v[r * d + c] = static_cast<float>(rng.normal());
      s += double(v[r * d + c]) * v[r * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) v[r * d + c] = static_cast<float>(v[r * d + c] / std::sqrt(s));
  }
  return Tensor<float>::from({n, d}, std::move(v));
}

std::vector<float> all_weights(const ModelState& s) {
  std::vector<float> out;
  for (const auto& p : s.trainable()) out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  for (const auto& p : s.image_teacher_params())
    out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
  return out;
}
}  // namespace

TEST_CASE("config parsing is strict") {
  const auto good = to_json(tiny_config());
  CHECK_NOTHROW(train_config_from_json(good));
  auto unknown = nlohmann::json(good);
  unknown["vit"]["bogus"] = 1;
  CHECK_THROWS_AS(train_config_from_json(unknown), ConfigError);
  auto version = nlohmann::json(good);
  version["version"] = 2;
  CHECK_THROWS_AS(train_config_from_json(version), ConfigError);
  auto run_block = nlohmann::json(good);
  run_block["run"] = {{"out", "x"}};
  CHECK_NOTHROW(train_config_from_json(run_block));
  CHECK_THROWS_AS(load_train_config("/nonexistent/sdclip.json"), ConfigError);

  TrainConfig dual = tiny_config();
  dual.variant = DistillVariant::kDualMomentum;
  CHECK_THROWS_AS(dual.validate(), ConfigError);
  dual.ema.text_ema = true;
  CHECK_NOTHROW(dual.validate());
}

TEST_CASE("config JSON round trip") {
  TrainConfig c = tiny_config();
  c.variant = DistillVariant::kTextMomentumRamp;
  c.ema.text_ema = true;
  c.seed = 17;
  const TrainConfig back = train_config_from_json(to_json(c));
  CHECK(to_json(back).dump() == to_json(c).dump());
}

TEST_CASE("learning-rate schedule") {
  OptimConfig o;
  o.warmup_steps = 10;
  CHECK(learning_rate_at(0, 100, o) == doctest::Approx(o.lr / 10));
  CHECK(learning_rate_at(9, 100, o) == doctest::Approx(o.lr));
  CHECK(learning_rate_at(99, 100, o) < o.lr * 0.01);
}

TEST_CASE("step 0 with λ = 1 and κ = 1: student and teacher CLIP losses agree") {
  TrainConfig c = tiny_config();
  c.vit.keep_rate = 1.0;
  c.variant = DistillVariant::kHardOnly;
  ModelState s = init_model(c);
  const PairBatch b = train_corpus(c).materialize(batch_indices(c, 0, 0), 16, 16);
  const StepResult r = train_step(b, s, c, 1.0, {{}, true});
  CHECK(r.metrics.clip_student_loss == doctest::Approx(r.metrics.clip_teacher_loss).epsilon(1e-5));
  CHECK_FALSE(r.grad_norms.image_teacher.has_value());
  CHECK(r.grad_norms.text.value() > 0.0);
  CHECK(r.grad_norms.image.value() > 0.0);
}

TEST_CASE("training leaves teacher parameters without gradients") {
  TrainConfig c = tiny_config();
  c.variant = DistillVariant::kDualMomentum;
  c.ema.text_ema = true;
  ModelState s = init_model(c);
  const PairBatch b = train_corpus(c).materialize(batch_indices(c, 0, 0), 16, 16);
  train_step(b, s, c, 0.5);
  for (const auto& p : s.image_teacher_params()) CHECK_FALSE(p.tensor.has_grad());
  for (const auto& p : s.text_teacher_params()) CHECK_FALSE(p.tensor.has_grad());
  CHECK(s.step == 1);
}

TEST_CASE("batches drop the partial tail and are seed-determined permutations") {
  TrainConfig c = tiny_config();
  c.corpus.train_size = 30;
  CHECK(c.steps_per_epoch() == 3);
  std::set<std::size_t> seen;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t i : batch_indices(c, 1, s)) seen.insert(i);
  CHECK(seen.size() == 24);
  CHECK(batch_indices(c, 1, 0) == batch_indices(c, 1, 0));
  CHECK(batch_indices(c, 1, 0) != batch_indices(c, 2, 0));
}

TEST_CASE("training is deterministic, resumable and writes one CSV row per step") {
  const TrainConfig c = tiny_config();
  const fs::path a = scratch("det_a"), b = scratch("det_b"), r = scratch("det_r");
  RunOptions oa;
  oa.out_dir = a;
  const RunResult ra = run_training(c, oa);
  RunOptions ob;
  ob.out_dir = b;
  run_training(c, ob);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(ra.metrics.size() == c.total_steps());

  std::istringstream lines(slurp(a / "metrics.csv"));
  std::string line;
  std::size_t count = 0;
  std::getline(lines, line);
  CHECK(line == kMetricsHeader);
  while (std::getline(lines, line)) ++count;
  CHECK(count == c.total_steps());

  RunOptions first;
  first.out_dir = r;
  first.stop_after_steps = 3;
  const RunResult partial = run_training(c, first);
  CHECK(partial.state.step == 3);
  RunOptions rest;
  rest.out_dir = r;
  rest.resume_from = partial.final_checkpoint;
  const RunResult resumed = run_training(c, rest);
  CHECK(slurp(r / "metrics.csv") == slurp(a / "metrics.csv"));
  CHECK(all_weights(resumed.state) == all_weights(ra.state));

  TrainConfig other = c;
  other.epochs = 3;
  RunOptions bad;
  bad.out_dir = scratch("det_bad");
  bad.resume_from = partial.final_checkpoint;
  CHECK_THROWS_AS(run_training(other, bad), ConfigError);
}

TEST_CASE("epochs = 0 yields the initialization") {
  TrainConfig c = tiny_config();
  c.epochs = 0;
  RunOptions o;
  o.out_dir = scratch("zero");
  const RunResult r = run_training(c, o);
  CHECK(all_weights(r.state) == all_weights(init_model(c)));
  const LoadedCheckpoint ck = load_checkpoint(r.final_checkpoint);
  CHECK(ck.state.step == 0);
  CHECK(all_weights(ck.state) == all_weights(init_model(c)));
}

TEST_CASE("checkpoint round trip and corruption detection") {
  const TrainConfig c = tiny_config();
  RunOptions o;
  o.out_dir = scratch("ckpt");
  const RunResult r = run_training(c, o);
  const EvalReport before = evaluate(r.state, c, EvalEncoder::kStudent, "x");
  const LoadedCheckpoint ck = load_checkpoint(r.final_checkpoint);
  const EvalReport after = evaluate(ck.state, ck.config, EvalEncoder::kStudent, "x");
  CHECK(to_json(before).dump() == to_json(after).dump());
  CHECK(ck.state.step == r.state.step);
  CHECK(ck.state.optimizer.steps() == r.state.optimizer.steps());
  CHECK(ck.state.center.values() == r.state.center.values());
  CHECK(ck.state.optimizer.second_moments() == r.state.optimizer.second_moments());

  const fs::path broken = scratch("ckpt_broken") / "final";
  fs::copy(r.final_checkpoint, broken, fs::copy_options::recursive);
  const auto size = fs::file_size(broken / "weights.bin");
  fs::resize_file(broken / "weights.bin", size - 4);
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);

  fs::resize_file(broken / "weights.bin", size);  // zero-filled tail: crc mismatch
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);

  fs::copy_file(r.final_checkpoint / "weights.bin", broken / "weights.bin",
                fs::copy_options::overwrite_existing);
  auto manifest = nlohmann::json::parse(slurp(broken / "manifest.json"));
  manifest["format_version"] = 99;
  std::ofstream(broken / "manifest.json") << manifest.dump();
  CHECK_THROWS_AS(load_checkpoint(broken), CheckpointError);
}

TEST_CASE("teacher equals student on a 0-step checkpoint") {
  TrainConfig c = tiny_config();
  const ModelState s = init_model(c);
  const auto stu = evaluate(s, c, EvalEncoder::kStudent, "id");
  auto tea = evaluate(s, c, EvalEncoder::kTeacher, "id");
  tea.encoder = stu.encoder;
  CHECK(to_json(stu).dump() == to_json(tea).dump());
}

TEST_CASE("retrieval oracle, chance level, and monotone recall") {
  Rng rng(21);
  const Tensor<float> e = unit_rows(rng, 200, 32);
  const RetrievalScores oracle = retrieval_from_embeddings(e, e);
  CHECK(oracle.image_to_text_r1 == 1.0);
  CHECK(oracle.text_to_image_r1 == 1.0);

  const std::size_t m = 1000;
  const Tensor<float> t = unit_rows(rng, m, 32), i = unit_rows(rng, m, 32);
  const RetrievalScores chance = retrieval_from_embeddings(t, i);
  const double p = 1.0 / m, sigma = std::sqrt(p * (1 - p) / m);
  CHECK(std::abs(chance.text_to_image_r1 - p) <= 3 * sigma + 1e-12);
  CHECK(chance.text_to_image_r1 <= chance.text_to_image_r5);
  CHECK(chance.text_to_image_r5 <= chance.text_to_image_r10);
  CHECK(chance.image_to_text_r1 <= chance.image_to_text_r5);
  CHECK(chance.image_to_text_r5 <= chance.image_to_text_r10);

  CHECK_THROWS_AS(retrieval_from_embeddings(unit_rows(rng, 9, 4), unit_rows(rng, 9, 4)), ConfigError);
}

TEST_CASE("zero-shot oracle on one-hot embeddings") {
  std::vector<float> prompts(16 * 16, 0.0f);
  for (std::size_t k = 0; k < 16; ++k) prompts[k * 16 + k] = 1.0f;
  std::vector<float> images(48 * 16, 0.0f);
  std::vector<std::size_t> labels(48);
  for (std::size_t n = 0; n < 48; ++n) {
    labels[n] = (n * 5) % 16;
    images[n * 16 + labels[n]] = 1.0f;
  }
  CHECK(zero_shot_from_embeddings(Tensor<float>::from({16, 16}, prompts),
                                  Tensor<float>::from({48, 16}, images), labels) == 1.0);
}

TEST_CASE("bench guards") {
  const VisionTransformer<float> vit(tiny_config().vit, 1);
  BenchOptions o;
  o.batch = 2;
  o.repeats = 1;
  CHECK_THROWS_AS(throughput_bench(vit, {1.0}, o), ConfigError);
  o.repeats = 20;
  CHECK_THROWS_AS(throughput_bench(vit, {1.2}, o), ConfigError);
  CHECK_THROWS_AS(throughput_bench(vit, {0.0}, o), ConfigError);
  o.warmup = 0;
  const auto rows = throughput_bench(vit, {1.0}, o);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].speedup == 1.0);
}

TEST_CASE("a zero center reproduces the centering-free loss bit-exactly") {
  TrainConfig on = tiny_config();
  TrainConfig off = on;
  off.ema.centering = false;
  const ModelState s = init_model(on);
  const PairBatch b = train_corpus(on).materialize(batch_indices(on, 0, 0), 16, 16);
  Tape<float> tape;
  Tape<float>::Scope scope(tape);
  const float with = step_forward(b, s, on, 0.5).total.item();
  const float without = step_forward(b, s, off, 0.5).total.item();
  CHECK(with == without);
}
