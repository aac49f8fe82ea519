#include "sdclip/data.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "sdclip/rng.hpp"

namespace sdclip {

namespace {
constexpr std::array<std::string_view, kNumShapes> kShapeWords{"circle", "square", "triangle",
                                                               "cross"};
constexpr std::array<std::string_view, kNumColors> kColorWords{"red", "green", "blue", "yellow"};
constexpr std::array<std::string_view, kNumSizes> kSizeWords{"small", "large"};
constexpr std::array<std::string_view, kNumPositions> kPositionWords{"left", "right", "top",
                                                                     "bottom", "center"};
constexpr std::array<std::string_view, kNumBackgrounds> kBackgroundWords{"dark", "light"};
constexpr std::array<std::string_view, 7> kTemplateWords{"a",  "photo", "of",        "at",
                                                         "the", "on",   "background"};

constexpr std::array<std::array<float, 3>, kNumColors> kRgb{{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
}};
// Exact binary fractions so that dark = 1 − light holds bit-for-bit.
constexpr std::array<float, kNumBackgrounds> kBackgroundLevel{0.25f, 0.75f};
constexpr std::array<std::array<double, 2>, kNumPositions> kCenters{{
    {0.25, 0.5}, {0.75, 0.5}, {0.5, 0.25}, {0.5, 0.75}, {0.5, 0.5}}};
constexpr std::array<double, kNumSizes> kHalfExtent{0.12, 0.22};
}  // namespace

std::string_view word_of(ShapeKind v) { return kShapeWords[static_cast<std::size_t>(v)]; }
std::string_view word_of(Color v) { return kColorWords[static_cast<std::size_t>(v)]; }
std::string_view word_of(SizeKind v) { return kSizeWords[static_cast<std::size_t>(v)]; }
std::string_view word_of(Position v) { return kPositionWords[static_cast<std::size_t>(v)]; }
std::string_view word_of(Background v) { return kBackgroundWords[static_cast<std::size_t>(v)]; }

std::size_t SceneSpec::index() const {
  std::size_t i = static_cast<std::size_t>(shape);
  i = i * kNumColors + static_cast<std::size_t>(color);
  i = i * kNumSizes + static_cast<std::size_t>(size);
  i = i * kNumPositions + static_cast<std::size_t>(position);
  i = i * kNumBackgrounds + static_cast<std::size_t>(background);
  return i;
}

SceneSpec SceneSpec::from_index(std::size_t index) {
  if (index >= kNumScenes) throw ContractError("scene index out of range");
  SceneSpec s;
  s.background = static_cast<Background>(index % kNumBackgrounds);
  index /= kNumBackgrounds;
  s.position = static_cast<Position>(index % kNumPositions);
  index /= kNumPositions;
  s.size = static_cast<SizeKind>(index % kNumSizes);
  index /= kNumSizes;
  s.color = static_cast<Color>(index % kNumColors);
  index /= kNumColors;
  s.shape = static_cast<ShapeKind>(index);
  return s;
}

Vocab::Vocab() {
  words_ = {"<pad>", "<eot>"};
  auto add = [this](const auto& list) {
    for (std::string_view w : list) words_.emplace_back(w);
  };
  add(kTemplateWords);
  add(kShapeWords);
  add(kColorWords);
  add(kSizeWords);
  add(kPositionWords);
  add(kBackgroundWords);
}

const Vocab& Vocab::instance() {
  static const Vocab vocab;
  return vocab;
}

std::int32_t Vocab::id(std::string_view word) const {
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (words_[i] == word) return static_cast<std::int32_t>(i);
  }
  throw VocabularyError("unknown word '" + std::string(word) + "'");
}

const std::string& Vocab::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<float> render_scene(const SceneSpec& spec, std::size_t image_size) {
  const std::size_t S = image_size;
  std::vector<float> img(S * S * 3, kBackgroundLevel[static_cast<std::size_t>(spec.background)]);
  const auto& center = kCenters[static_cast<std::size_t>(spec.position)];
  const double cx = center[0] * static_cast<double>(S);
  const double cy = center[1] * static_cast<double>(S);
  const double r = kHalfExtent[static_cast<std::size_t>(spec.size)] * static_cast<double>(S);
  const auto& rgb = kRgb[static_cast<std::size_t>(spec.color)];
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      bool inside = false;
      switch (spec.shape) {
        case ShapeKind::kCircle:
          inside = dx * dx + dy * dy <= r * r;
          break;
        case ShapeKind::kSquare:
          inside = std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
          break;
        case ShapeKind::kTriangle:
          inside = dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
          break;
        case ShapeKind::kCross:
          inside = (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) ||
                   (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
          break;
      }
      if (inside) std::copy(rgb.begin(), rgb.end(), img.begin() + static_cast<std::ptrdiff_t>((y * S + x) * 3));
    }
  }
  return img;
}

std::vector<std::string> caption(const SceneSpec& spec, std::uint64_t template_seed) {
  const std::string shape(word_of(spec.shape)), color(word_of(spec.color)),
      size(word_of(spec.size)), pos(word_of(spec.position)), bg(word_of(spec.background));
  switch (splitmix64(template_seed) % kNumTemplates) {
    case 0:
      return {"a", "photo", "of", "a", size, color, shape, "at", "the", pos};
    case 1:
      return {"a", size, color, shape, "on", "a", bg, "background"};
    case 2:
      return {"a", color, shape, "at", "the", pos, "on", "a", bg, "background"};
    default:
      return {"a", "photo", "of", "a", size, color, shape, "at", "the", pos,
              "on", "a", bg, "background"};
  }
}

std::vector<std::string> class_prompt(std::size_t class_index) {
  if (class_index >= kNumClasses) throw ContractError("class index out of range");
  return {"a", "photo", "of", "a", std::string(kColorWords[class_index % kNumColors]),
          std::string(kShapeWords[class_index / kNumColors])};
}

std::vector<std::int32_t> tokenize(const std::vector<std::string>& words, std::size_t max_len) {
  if (words.size() + 1 > max_len) {
    throw ConfigError("caption of " + std::to_string(words.size()) +
                      " words does not fit max_len " + std::to_string(max_len));
  }
  const Vocab& vocab = Vocab::instance();
  std::vector<std::int32_t> ids(max_len, Vocab::kPad);
  for (std::size_t i = 0; i < words.size(); ++i) ids[i] = vocab.id(words[i]);
  ids[words.size()] = Vocab::kEot;
  return ids;
}

std::vector<std::string> detokenize(std::span<const std::int32_t> ids) {
  const Vocab& vocab = Vocab::instance();
  std::vector<std::string> words;
  for (std::int32_t id : ids) {
    if (id == Vocab::kEot) break;
    if (id == Vocab::kPad) continue;
    words.push_back(vocab.word(id));
  }
  return words;
}

Corpus::Corpus(std::uint64_t seed, std::size_t size, double misalignment) {
  if (!(misalignment >= 0.0 && misalignment <= 1.0)) {
    throw ConfigError("misalignment rate " + std::to_string(misalignment) + " outside [0, 1]");
  }
  Rng rng(derive_seed(seed, {0x636f72707573}));
  specs_.resize(size);
  template_seeds_.resize(size);
  for (std::size_t i = 0; i < size; ++i) {
    specs_[i] = SceneSpec::from_index(rng.uniform_index(kNumScenes));
    template_seeds_[i] = rng.next_u64();
  }
  caption_source_.resize(size);
  std::iota(caption_source_.begin(), caption_source_.end(), std::size_t{0});
  misaligned_.assign(size, false);

  const auto swap_count =
      static_cast<std::size_t>(std::floor(misalignment * static_cast<double>(size) + 1e-9));
  if (swap_count >= 2) {
    std::vector<std::size_t> order(size);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    order.resize(swap_count);
    // Cyclic shift over a random subset: a derangement of its captions.
    for (std::size_t i = 0; i < swap_count; ++i) {
      caption_source_[order[i]] = order[(i + 1) % swap_count];
      misaligned_[order[i]] = true;
    }
  }
}

std::size_t Corpus::misaligned_count() const {
  return static_cast<std::size_t>(std::count(misaligned_.begin(), misaligned_.end(), true));
}

PairBatch Corpus::materialize(std::span<const std::size_t> indices, std::size_t image_size,
                              std::size_t max_len) const {
  PairBatch batch;
  batch.max_len = max_len;
  batch.images.count = indices.size();
  batch.images.size = image_size;
  batch.images.channels = 3;
  batch.images.pixels.reserve(indices.size() * image_size * image_size * 3);
  batch.tokens.reserve(indices.size() * max_len);
  for (std::size_t i : indices) {
    if (i >= specs_.size()) throw ContractError("corpus index out of range");
    const auto img = render_scene(specs_[i], image_size);
    batch.images.pixels.insert(batch.images.pixels.end(), img.begin(), img.end());
    const std::size_t src = caption_source_[i];
    const auto ids = tokenize(caption(specs_[src], template_seeds_[src]), max_len);
    batch.tokens.insert(batch.tokens.end(), ids.begin(), ids.end());
    batch.misaligned.push_back(misaligned_[i]);
    batch.specs.push_back(specs_[i]);
    batch.caption_source.push_back(src);
  }
  return batch;
}

PairBatch Corpus::materialize_all(std::size_t image_size, std::size_t max_len) const {
  std::vector<std::size_t> all(specs_.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return materialize(all, image_size, max_len);
}

PairBatch make_batch(std::uint64_t seed, std::size_t n, double misalignment,
                     std::size_t image_size, std::size_t max_len) {
  return Corpus(seed, n, misalignment).materialize_all(image_size, max_len);
}

namespace {
void write_png(const std::filesystem::path& path, std::span<const float> hwc, std::size_t size) {
  std::vector<std::uint8_t> bytes(hwc.size());
  for (std::size_t i = 0; i < hwc.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(hwc[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(size);
  image.height = static_cast<png_uint_32>(size);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("failed to write " + path.string() + ": " + image.message);
  }
}
}  // namespace

void dump_pairs(const PairBatch& batch, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream jsonl(dir / "pairs.jsonl");
  if (!jsonl) throw std::runtime_error("cannot write " + (dir / "pairs.jsonl").string());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::ostringstream name;
    name << "pair_" << std::setw(5) << std::setfill('0') << i << ".png";
    write_png(dir / name.str(), batch.images.image(i), batch.images.size);
    std::string text;
    for (const auto& w : detokenize(batch.token_row(i))) {
      if (!text.empty()) text += ' ';
      text += w;
    }
    const SceneSpec& s = batch.specs[i];
    nlohmann::ordered_json line;
    line["image_path"] = name.str();
    line["caption"] = text;
    line["spec"] = {{"shape", word_of(s.shape)},       {"color", word_of(s.color)},
                    {"size", word_of(s.size)},         {"position", word_of(s.position)},
                    {"background", word_of(s.background)}};
    line["misaligned"] = static_cast<bool>(batch.misaligned[i]);
    jsonl << line.dump() << '\n';
  }
}

}  // namespace sdclip
