#include "hvqa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "hvqa/binary_io.hpp"
#include "hvqa/rng.hpp"

namespace hvqa {

const std::array<Rgb, kPaletteSize>& palette() {
  static const std::array<Rgb, kPaletteSize> colors{
      Rgb{255, 0, 0}, Rgb{0, 255, 0}, Rgb{0, 0, 255}, Rgb{255, 156, 0}, Rgb{255, 255, 0}, Rgb{128, 0, 255}};
  return colors;
}

const std::array<std::string_view, kPaletteSize>& color_names() {
  static const std::array<std::string_view, kPaletteSize> names{"red", "green", "blue", "orange", "yellow", "purple"};
  return names;
}

std::size_t Scene::object_with_color(std::size_t color) const {
  for (std::size_t i = 0; i < objects.size(); ++i)
    if (objects[i].color == color) return i;
  throw ArgumentError("scene has no object of color " + std::to_string(color));
}

double object_size_for(std::size_t canvas) { return static_cast<double>(canvas) * 10.0 / 64.0; }

Scene generate_scene(std::uint64_t seed, std::size_t canvas) {
  Rng rng(seed);
  Scene scene;
  scene.canvas = canvas;
  scene.object_size = object_size_for(canvas);
  const double px = static_cast<double>(canvas);
  const double half = scene.object_size / 2.0 / px;  // keeps every shape inside the canvas
  const double min_dist = scene.object_size / px;
  const auto colors = rng.permutation(kPaletteSize);
  for (std::size_t i = 0; i < kObjectsPerScene; ++i) {
    SceneObject obj;
    obj.color = colors[i];
    obj.shape = rng.bernoulli(0.5) ? ShapeKind::kCircle : ShapeKind::kSquare;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
      obj.x = rng.uniform(half, 1.0 - half);
      obj.y = rng.uniform(half, 1.0 - half);
      placed = std::all_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& o) {
        return std::hypot(o.x - obj.x, o.y - obj.y) >= min_dist;
      });
    }
    if (!placed) throw std::runtime_error("generate_scene: could not place object " + std::to_string(i));
    scene.objects.push_back(obj);
  }
  return scene;
}

std::string scene_violation(const Scene& scene) {
  if (scene.objects.size() != kObjectsPerScene)
    return "scene has " + std::to_string(scene.objects.size()) + " objects";
  const double px = static_cast<double>(scene.canvas);
  const double half = scene.object_size / 2.0 / px;
  std::array<bool, kPaletteSize> seen{};
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const auto& a = scene.objects[i];
    if (a.color >= kPaletteSize || seen[a.color]) return "color repeated or invalid at object " + std::to_string(i);
    seen[a.color] = true;
    if (a.x < half || a.x > 1.0 - half || a.y < half || a.y > 1.0 - half)
      return "object " + std::to_string(i) + " leaves the canvas";
    for (std::size_t j = i + 1; j < scene.objects.size(); ++j) {
      const auto& b = scene.objects[j];
      if (std::hypot(a.x - b.x, a.y - b.y) * px < scene.object_size)
        return "objects " + std::to_string(i) + " and " + std::to_string(j) + " overlap";
    }
  }
  return {};
}

Array<float> render(const Scene& scene) {
  const std::size_t n = scene.canvas;
  Array<float> image({n, n, 3});
  auto put = [&](std::size_t row, std::size_t col, Rgb c) {
    float* px = image.ptr() + (row * n + col) * 3;
    px[0] = static_cast<float>(c.r) / 255.0f;
    px[1] = static_cast<float>(c.g) / 255.0f;
    px[2] = static_cast<float>(c.b) / 255.0f;
  };
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) put(r, c, kBackground);
  const double half = scene.object_size / 2.0;
  for (const auto& obj : scene.objects) {
    const double cx = obj.x * static_cast<double>(n), cy = obj.y * static_cast<double>(n);
    const Rgb color = palette()[obj.color];
    const auto lo_r = static_cast<std::size_t>(std::max(0.0, std::floor(cy - half)));
    const auto hi_r = std::min(n, static_cast<std::size_t>(std::ceil(cy + half)) + 1);
    const auto lo_c = static_cast<std::size_t>(std::max(0.0, std::floor(cx - half)));
    const auto hi_c = std::min(n, static_cast<std::size_t>(std::ceil(cx + half)) + 1);
    for (std::size_t r = lo_r; r < hi_r; ++r)
      for (std::size_t c = lo_c; c < hi_c; ++c) {
        const double dx = static_cast<double>(c) + 0.5 - cx, dy = static_cast<double>(r) + 0.5 - cy;
        const bool inside = obj.shape == ShapeKind::kSquare ? (std::abs(dx) < half && std::abs(dy) < half)
                                                            : (dx * dx + dy * dy < half * half);
        if (inside) put(r, c, color);
      }
  }
  return image;
}

std::string to_string(QuestionFamily family) {
  switch (family) {
    case QuestionFamily::kNonRelational: return "non_relational";
    case QuestionFamily::kRelational: return "relational";
    case QuestionFamily::kCount: return "count";
  }
  return "?";
}

const std::vector<std::string>& question_vocab() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v{"what", "shape", "is",  "the",  "object",  "on",   "left", "closest", "to",
                               "farthest", "from", "how", "many", "objects", "have", "same", "as",     "?"};
    for (auto c : color_names()) v.emplace_back(c);
    return v;
  }();
  return vocab;
}

const std::vector<std::string>& answer_vocab() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v{"square", "circle", "yes", "no", "1", "2", "3", "4", "5", "6"};
    for (auto c : color_names()) v.emplace_back(c);
    return v;
  }();
  return vocab;
}

namespace {

Token token(std::string_view word) {
  const auto& v = question_vocab();
  const auto it = std::find(v.begin(), v.end(), word);
  if (it == v.end()) throw std::logic_error("unknown question word");
  return static_cast<Token>(it - v.begin());
}

TokenSeq sentence(std::initializer_list<std::string_view> words) {
  TokenSeq out;
  for (auto w : words) out.push_back(token(w));
  return out;
}

std::uint16_t shape_answer(ShapeKind s) { return s == ShapeKind::kSquare ? answers::kSquare : answers::kCircle; }

double dist2(const SceneObject& a, const SceneObject& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

// Nearest (or farthest) other object; ties go to the lower index.
std::size_t extreme_neighbor(const Scene& scene, std::size_t subject, bool farthest) {
  std::size_t best = subject;
  double best_d = 0.0;
  for (std::size_t j = 0; j < scene.objects.size(); ++j) {
    if (j == subject) continue;
    const double dd = dist2(scene.objects[subject], scene.objects[j]);
    if (best == subject || (farthest ? dd > best_d : dd < best_d)) {
      best = j;
      best_d = dd;
    }
  }
  return best;
}

}  // namespace

QuestionAnswer ask(const Scene& scene, QuestionTemplate kind, std::size_t subject) {
  if (subject >= scene.objects.size()) throw ArgumentError("ask: subject index out of range");
  const auto& obj = scene.objects[subject];
  const std::string_view color = color_names()[obj.color];
  QuestionAnswer qa;
  qa.kind = kind;
  qa.subject = subject;
  switch (kind) {
    case QuestionTemplate::kShapeOf:
      qa.family = QuestionFamily::kNonRelational;
      qa.tokens = sentence({"what", "shape", "is", "the", color, "object", "?"});
      qa.answer = shape_answer(obj.shape);
      break;
    case QuestionTemplate::kIsLeft:
      qa.family = QuestionFamily::kNonRelational;
      qa.tokens = sentence({"is", "the", color, "object", "on", "the", "left", "?"});
      qa.answer = obj.x < 0.5 ? answers::kYes : answers::kNo;
      break;
    case QuestionTemplate::kClosestShape:
      qa.family = QuestionFamily::kRelational;
      qa.tokens = sentence({"what", "shape", "is", "the", "object", "closest", "to", "the", color, "object", "?"});
      qa.answer = shape_answer(scene.objects[extreme_neighbor(scene, subject, false)].shape);
      break;
    case QuestionTemplate::kFarthestShape:
      qa.family = QuestionFamily::kRelational;
      qa.tokens = sentence({"what", "shape", "is", "the", "object", "farthest", "from", "the", color, "object", "?"});
      qa.answer = shape_answer(scene.objects[extreme_neighbor(scene, subject, true)].shape);
      break;
    case QuestionTemplate::kCountSameShape: {
      qa.family = QuestionFamily::kCount;
      qa.tokens =
          sentence({"how", "many", "objects", "have", "the", "same", "shape", "as", "the", color, "object", "?"});
      const auto n = static_cast<std::size_t>(std::count_if(scene.objects.begin(), scene.objects.end(),
                                                            [&](const SceneObject& o) { return o.shape == obj.shape; }));
      qa.answer = answers::count(n);
      break;
    }
  }
  return qa;
}

QuestionAnswer make_qa(const Scene& scene, std::uint64_t seed) {
  Rng rng(seed);
  const auto family = static_cast<QuestionFamily>(rng.below(kFamilyCount));
  QuestionTemplate kind = QuestionTemplate::kCountSameShape;
  if (family == QuestionFamily::kNonRelational)
    kind = rng.below(2) ? QuestionTemplate::kIsLeft : QuestionTemplate::kShapeOf;
  else if (family == QuestionFamily::kRelational)
    kind = rng.below(2) ? QuestionTemplate::kFarthestShape : QuestionTemplate::kClosestShape;
  const auto subject = static_cast<std::size_t>(rng.below(scene.objects.size()));
  return ask(scene, kind, subject);
}

std::string detokenize(const TokenSeq& tokens) {
  std::string out;
  for (auto t : tokens) {
    if (!out.empty()) out += ' ';
    out += t < question_vocab().size() ? question_vocab()[t] : "<unk>";
  }
  return out;
}

Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t canvas) {
  const auto scene = generate_scene(mix_seed(seed, 2 * index), canvas);
  auto qa = make_qa(scene, mix_seed(seed, 2 * index + 1));
  return Sample{render(scene), std::move(qa.tokens), qa.answer, qa.family};
}

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("HVQA_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) n = std::min(n, static_cast<std::size_t>(v));
  }
  return n;
}

Dataset generate_dataset(std::size_t n, std::uint64_t seed, std::size_t canvas, std::size_t threads) {
  Dataset ds;
  ds.header.count = static_cast<std::uint32_t>(n);
  ds.header.width = ds.header.height = static_cast<std::uint32_t>(canvas);
  ds.header.question_vocab = static_cast<std::uint32_t>(question_vocab().size());
  ds.samples.resize(n);
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads ? threads : worker_threads(), n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) ds.samples[i] = generate_sample(seed, i, canvas);
    return ds;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) ds.samples[i] = generate_sample(seed, i, canvas);
    });
  for (auto& t : pool) t.join();
  return ds;
}

namespace {

constexpr std::string_view kDatasetMagic = "HVQA";
constexpr std::string_view kFeatureMagic = "HFMP";

}  // namespace

void write_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  const auto& h = dataset.header;
  if (h.count != dataset.samples.size())
    throw ArgumentError("write_dataset: header count " + std::to_string(h.count) + " but " +
                        std::to_string(dataset.samples.size()) + " samples");
  const std::size_t pixels = static_cast<std::size_t>(h.width) * h.height * h.channels;
  io::ByteWriter w;
  w.magic(kDatasetMagic);
  w.u32(h.version);
  w.u32(h.count);
  w.u32(h.width);
  w.u32(h.height);
  w.u32(h.channels);
  w.u32(h.max_question_length);
  w.u32(h.question_vocab);
  w.u32(h.answer_vocab);
  for (const auto& s : dataset.samples) {
    if (s.image.size() != pixels) throw ArgumentError("write_dataset: image size disagrees with the header");
    if (s.tokens.size() > h.max_question_length) throw ArgumentError("write_dataset: question longer than the header allows");
    for (float v : s.image.data()) w.f32(v);
    for (std::size_t t = 0; t < h.max_question_length; ++t) w.u16(t < s.tokens.size() ? s.tokens[t] : kTokenPad);
    w.u16(s.answer);
    w.u8(static_cast<std::uint8_t>(s.family));
  }
  io::write_file(path, w.bytes());
}

Dataset read_dataset(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  r.expect_magic(kDatasetMagic);
  Dataset ds;
  auto& h = ds.header;
  const auto version_at = r.offset();
  h.version = r.u32("header");
  if (h.version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(h.version), version_at);
  h.count = r.u32("header");
  h.width = r.u32("header");
  h.height = r.u32("header");
  h.channels = r.u32("header");
  h.max_question_length = r.u32("header");
  h.question_vocab = r.u32("header");
  h.answer_vocab = r.u32("header");
  if (h.width == 0 || h.height == 0 || h.channels == 0 || h.max_question_length == 0)
    throw FormatError("header declares a zero dimension", r.offset());
  const std::size_t pixels = static_cast<std::size_t>(h.width) * h.height * h.channels;
  const std::uint64_t record_bytes = 4ull * pixels + 2ull * h.max_question_length + 2 + 1;
  ds.samples.reserve(h.count);
  for (std::uint32_t i = 0; i < h.count; ++i) {
    r.require(record_bytes, "record " + std::to_string(i));
    Sample s;
    s.image = Array<float>({h.height, h.width, h.channels});
    for (auto& v : s.image.data()) v = r.f32();
    for (std::uint32_t t = 0; t < h.max_question_length; ++t) {
      const auto at = r.offset();
      const Token tok = r.u16();
      if (tok == kTokenPad) continue;
      if (tok >= h.question_vocab) throw FormatError("token id " + std::to_string(tok) + " outside the vocabulary", at);
      s.tokens.push_back(tok);
    }
    const auto at = r.offset();
    s.answer = r.u16();
    if (s.answer >= h.answer_vocab) throw FormatError("answer id " + std::to_string(s.answer) + " outside the vocabulary", at);
    const auto family = r.u8();
    if (family >= kFamilyCount) throw FormatError("unknown question family " + std::to_string(family), at + 2);
    s.family = static_cast<QuestionFamily>(family);
    ds.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0)
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last record", r.offset());
  return ds;
}

std::string dataset_summary(const Dataset& dataset) {
  std::array<std::size_t, kFamilyCount> family_counts{};
  std::array<std::map<std::uint16_t, std::size_t>, kFamilyCount> answer_counts;
  for (const auto& s : dataset.samples) {
    const auto f = static_cast<std::size_t>(s.family);
    ++family_counts[f];
    ++answer_counts[f][s.answer];
  }
  std::ostringstream os;
  os << "samples " << dataset.samples.size() << "\n";
  for (std::size_t f = 0; f < kFamilyCount; ++f)
    os << "family " << to_string(static_cast<QuestionFamily>(f)) << " " << family_counts[f] << "\n";
  for (std::size_t f = 0; f < kFamilyCount; ++f)
    for (const auto& [answer, count] : answer_counts[f]) {
      const auto& name = answer < answer_vocab().size() ? answer_vocab()[answer] : std::to_string(answer);
      os << "answer " << to_string(static_cast<QuestionFamily>(f)) << " " << name << " " << count << "\n";
    }
  return os.str();
}

template <typename T>
Array<T> normalize_image(const Array<T>& image) {
  double total = 0.0;
  for (auto v : image.data()) total += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::max(std::sqrt(total), 1e-8);
  Array<T> out(image.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(static_cast<double>(image[i]) / norm);
  return out;
}

template Array<float> normalize_image(const Array<float>&);
template Array<double> normalize_image(const Array<double>&);

void write_feature_map(const Array<float>& map, const std::filesystem::path& path) {
  if (map.rank() != 3) throw ShapeError("write_feature_map: expected [w,h,d], got " + shape_str(map.shape()));
  io::ByteWriter w;
  w.magic(kFeatureMagic);
  for (std::size_t i = 0; i < 3; ++i) w.u32(static_cast<std::uint32_t>(map.dim(i)));
  for (float v : map.data()) w.f32(v);
  io::write_file(path, w.bytes());
}

Array<float> load_feature_map(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  r.expect_magic(kFeatureMagic);
  const auto w = r.u32("header"), h = r.u32("header"), d = r.u32("header");
  if (w == 0 || h == 0 || d == 0) throw FormatError("feature map declares a zero dimension", r.offset());
  const std::uint64_t expected = 4ull * w * h * d;
  if (r.remaining() != expected)
    throw FormatError("payload holds " + std::to_string(r.remaining()) + " bytes, header implies " +
                          std::to_string(expected),
                      r.offset());
  Array<float> map({w, h, d});
  for (auto& v : map.data()) v = r.f32();
  return map;
}

}  // namespace hvqa
