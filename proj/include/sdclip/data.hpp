#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sdclip/encoders.hpp"

namespace sdclip {

enum class ShapeKind : std::uint8_t { kCircle, kSquare, kTriangle, kCross };
enum class Color : std::uint8_t { kRed, kGreen, kBlue, kYellow };
enum class SizeKind : std::uint8_t { kSmall, kLarge };
enum class Position : std::uint8_t { kLeft, kRight, kTop, kBottom, kCenter };
enum class Background : std::uint8_t { kDark, kLight };

inline constexpr std::size_t kNumShapes = 4;
inline constexpr std::size_t kNumColors = 4;
inline constexpr std::size_t kNumSizes = 2;
inline constexpr std::size_t kNumPositions = 5;
inline constexpr std::size_t kNumBackgrounds = 2;
inline constexpr std::size_t kNumScenes =
    kNumShapes * kNumColors * kNumSizes * kNumPositions * kNumBackgrounds;  // 320
inline constexpr std::size_t kNumTemplates = 4;
// Zero-shot label set: shape × color.
inline constexpr std::size_t kNumClasses = kNumShapes * kNumColors;

std::string_view word_of(ShapeKind v);
std::string_view word_of(Color v);
std::string_view word_of(SizeKind v);
std::string_view word_of(Position v);
std::string_view word_of(Background v);

struct SceneSpec {
  ShapeKind shape = ShapeKind::kCircle;
  Color color = Color::kRed;
  SizeKind size = SizeKind::kSmall;
  Position position = Position::kCenter;
  Background background = Background::kDark;

  // Dense index in [0, kNumScenes).
  std::size_t index() const;
  static SceneSpec from_index(std::size_t index);
  std::size_t class_index() const {
    return static_cast<std::size_t>(shape) * kNumColors + static_cast<std::size_t>(color);
  }
  bool operator==(const SceneSpec&) const = default;
};

/// Closed word list: pad (id 0), end-of-text (id 1), template words, then
/// every scene attribute word.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kEot = 1;

  static const Vocab& instance();

  std::int32_t id(std::string_view word) const;  // throws VocabularyError
  const std::string& word(std::int32_t id) const;
  std::size_t size() const { return words_.size(); }

 private:
  Vocab();
  std::vector<std::string> words_;
};

/// Solid background with one filled, un-antialiased shape. HWC, values in [0, 1].
std::vector<float> render_scene(const SceneSpec& spec, std::size_t image_size);

/// One of kNumTemplates fixed sentence templates, picked by `template_seed`.
std::vector<std::string> caption(const SceneSpec& spec, std::uint64_t template_seed);
std::vector<std::string> class_prompt(std::size_t class_index);

/// ids of `words` followed by end-of-text, right-padded with pad to max_len.
std::vector<std::int32_t> tokenize(const std::vector<std::string>& words, std::size_t max_len);
// Inverse of tokenize: stops at end-of-text.
std::vector<std::string> detokenize(std::span<const std::int32_t> ids);

struct PairBatch {
  Images images;
  std::size_t max_len = 16;
  std::vector<std::int32_t> tokens;  // count × max_len
  std::vector<bool> misaligned;
  std::vector<SceneSpec> specs;            // of each image
  std::vector<std::size_t> caption_source;  // pair whose caption this row carries

  std::size_t size() const { return images.count; }
  std::span<const std::int32_t> token_row(std::size_t i) const {
    return std::span<const std::int32_t>(tokens).subspan(i * max_len, max_len);
  }
};

/// Pair metadata for a corpus; images and token rows are materialized on
/// demand. A pure function of (seed, size, misalignment).
class Corpus {
 public:
  Corpus(std::uint64_t seed, std::size_t size, double misalignment);

  std::size_t size() const { return specs_.size(); }
  std::size_t misaligned_count() const;

  PairBatch materialize(std::span<const std::size_t> indices, std::size_t image_size,
                        std::size_t max_len) const;
  PairBatch materialize_all(std::size_t image_size, std::size_t max_len) const;

  const std::vector<SceneSpec>& specs() const { return specs_; }
  const std::vector<std::size_t>& caption_source() const { return caption_source_; }

 private:
  std::vector<SceneSpec> specs_;
  std::vector<std::uint64_t> template_seeds_;
  std::vector<std::size_t> caption_source_;
  std::vector<bool> misaligned_;
};

/// Draws N scenes, renders and captions them, then deranges the captions of
/// ⌊p·N⌋ random pairs among themselves. With a single chosen pair no swap is
/// possible and the batch stays aligned.
PairBatch make_batch(std::uint64_t seed, std::size_t n, double misalignment,
                     std::size_t image_size = 64, std::size_t max_len = 16);

/// Writes each pair as pair_XXXXX.png plus one JSONL line
/// {image_path, caption, spec, misaligned} to `dir`/pairs.jsonl.
void dump_pairs(const PairBatch& batch, const std::filesystem::path& dir);

}  // namespace sdclip
