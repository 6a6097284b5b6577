#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "hvqa/tensor.hpp"
#include "hvqa/types.hpp"

namespace hvqa {

// ---------------------------------------------------------------------------
// Scenes

enum class ShapeKind : std::uint8_t { kSquare = 0, kCircle = 1 };

inline constexpr std::size_t kObjectsPerScene = 6;
inline constexpr std::size_t kPaletteSize = 6;
inline constexpr std::size_t kDefaultCanvas = 64;
inline constexpr int kMaxPlacementAttempts = 1000;

struct Rgb {
  std::uint8_t r, g, b;
};

/// red, green, blue, orange, yellow, purple
const std::array<Rgb, kPaletteSize>& palette();
const std::array<std::string_view, kPaletteSize>& color_names();
inline constexpr Rgb kBackground{128, 128, 128};

struct SceneObject {
  ShapeKind shape = ShapeKind::kSquare;
  std::size_t color = 0;  // palette index, unique within a scene
  double x = 0.0, y = 0.0;  // center in [0,1]^2; x grows rightwards, y downwards
};

struct Scene {
  std::vector<SceneObject> objects;
  std::size_t canvas = kDefaultCanvas;  // square canvas side in pixels
  double object_size = 10.0;            // side / diameter in pixels

  /// Index of the object with the given palette color.
  std::size_t object_with_color(std::size_t color) const;
};

/// Object side for a canvas (10 px at 64).
double object_size_for(std::size_t canvas);

/// Deterministic in `seed`. Throws std::runtime_error if placement fails.
Scene generate_scene(std::uint64_t seed, std::size_t canvas = kDefaultCanvas);

/// Empty string when every scene invariant holds, otherwise the first violation.
std::string scene_violation(const Scene& scene);

/// Filled shapes on a mid-gray background, no anti-aliasing: [canvas, canvas, 3] in [0,1], rows first.
Array<float> render(const Scene& scene);

// ---------------------------------------------------------------------------
// Questions

enum class QuestionFamily : std::uint8_t { kNonRelational = 0, kRelational = 1, kCount = 2 };
inline constexpr std::size_t kFamilyCount = 3;
std::string to_string(QuestionFamily family);

enum class QuestionTemplate : std::uint8_t { kShapeOf, kIsLeft, kClosestShape, kFarthestShape, kCountSameShape };

inline constexpr std::size_t kMaxQuestionLength = 12;
inline constexpr std::size_t kAnswerVocabSize = 16;
inline constexpr Token kTokenPad = 0xFFFF;

const std::vector<std::string>& question_vocab();
const std::vector<std::string>& answer_vocab();

namespace answers {
inline constexpr std::uint16_t kSquare = 0, kCircle = 1, kYes = 2, kNo = 3;
/// Answer class of the count n (1..6).
constexpr std::uint16_t count(std::size_t n) { return static_cast<std::uint16_t>(3 + n); }
}  // namespace answers

struct QuestionAnswer {
  TokenSeq tokens;
  std::uint16_t answer = 0;
  QuestionFamily family = QuestionFamily::kNonRelational;
  QuestionTemplate kind = QuestionTemplate::kShapeOf;
  std::size_t subject = 0;  // object index named by the question's color
};

/// Samples one template and computes its answer from the scene geometry.
QuestionAnswer make_qa(const Scene& scene, std::uint64_t seed);

/// Question with a given template and subject object.
QuestionAnswer ask(const Scene& scene, QuestionTemplate kind, std::size_t subject);

std::string detokenize(const TokenSeq& tokens);

// ---------------------------------------------------------------------------
// Samples and the dataset container

struct Sample {
  Array<float> image;  // [h, w, c]
  TokenSeq tokens;
  std::uint16_t answer = 0;
  QuestionFamily family = QuestionFamily::kNonRelational;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct DatasetHeader {
  std::uint32_t version = 1;
  std::uint32_t count = 0;
  std::uint32_t width = kDefaultCanvas, height = kDefaultCanvas, channels = 3;
  std::uint32_t max_question_length = kMaxQuestionLength;
  std::uint32_t question_vocab = 0;
  std::uint32_t answer_vocab = kAnswerVocabSize;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Sample> samples;
};

inline constexpr std::uint32_t kDatasetVersion = 1;

/// Sample i of the dataset generated from `seed`; per-sample seeds are split from the master seed.
Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t canvas = kDefaultCanvas);

/// n samples; work is spread over `threads` workers (0: HVQA_THREADS or hardware concurrency).
Dataset generate_dataset(std::size_t n, std::uint64_t seed, std::size_t canvas = kDefaultCanvas,
                         std::size_t threads = 0);

/// Worker cap from HVQA_THREADS, defaulting to hardware concurrency.
std::size_t worker_threads();

void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
/// Validates magic and version before reading records; FormatError names the byte offset.
Dataset read_dataset(const std::filesystem::path& path);

/// Family and per-family answer histograms as text.
std::string dataset_summary(const Dataset& dataset);

/// x / max(||x||_2, 1e-8) over the whole array.
template <typename T>
Array<T> normalize_image(const Array<T>& image);

// ---------------------------------------------------------------------------
// External feature maps ("HFMP", u32 w, h, d, f32 payload)

void write_feature_map(const Array<float>& map, const std::filesystem::path& path);
Array<float> load_feature_map(const std::filesystem::path& path);

}  // namespace hvqa
