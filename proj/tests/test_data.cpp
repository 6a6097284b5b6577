#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "hvqa/binary_io.hpp"
#include "hvqa/data.hpp"
#include "hvqa/rng.hpp"
#include "support/geometry_oracle.hpp"

using namespace hvqa;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "hvqa_test_data";
  fs::create_directories(dir);
  return dir / name;
}

std::array<float, 3> pixel(const Array<float>& img, std::size_t row, std::size_t col) {
  const std::size_t w = img.dim(1);
  const float* p = img.ptr() + (row * w + col) * 3;
  return {p[0], p[1], p[2]};
}

std::array<float, 3> as_float(Rgb c) { return {c.r / 255.0f, c.g / 255.0f, c.b / 255.0f}; }

void truncate_file(const fs::path& path, std::uintmax_t size) { fs::resize_file(path, size); }

}  // namespace

TEST(Scene, Deterministic) {
  const auto a = generate_scene(42), b = generate_scene(42);
  ASSERT_EQ(a.objects.size(), kObjectsPerScene);
  for (std::size_t i = 0; i < a.objects.size(); ++i) {
    EXPECT_EQ(a.objects[i].x, b.objects[i].x);
    EXPECT_EQ(a.objects[i].y, b.objects[i].y);
    EXPECT_EQ(a.objects[i].color, b.objects[i].color);
    EXPECT_EQ(a.objects[i].shape, b.objects[i].shape);
  }
  EXPECT_EQ(object_size_for(64), 10.0);
  EXPECT_EQ(object_size_for(128), 20.0);
}

TEST(Scene, TenThousandScenesHoldInvariants) {
  for (std::uint64_t s = 0; s < 10000; ++s) {
    const auto scene = generate_scene(mix_seed(77, s));
    ASSERT_EQ(scene.objects.size(), 6u);
    // Independent scan of the invariants.
    std::set<std::size_t> colors;
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& a = scene.objects[i];
      colors.insert(a.color);
      for (std::size_t j = i + 1; j < 6; ++j) {
        const auto& b = scene.objects[j];
        ASSERT_GE(std::hypot(a.x - b.x, a.y - b.y) * 64.0, 10.0 - 1e-9);
      }
    }
    ASSERT_EQ(colors.size(), 6u);
    ASSERT_EQ(scene_violation(scene), "");
  }
}

TEST(Scene, ViolationsAreReported) {
  auto scene = generate_scene(1);
  scene.objects[1].color = scene.objects[0].color;
  EXPECT_NE(scene_violation(scene), "");
  scene = generate_scene(1);
  scene.objects[1].x = scene.objects[0].x;
  scene.objects[1].y = scene.objects[0].y;
  EXPECT_NE(scene_violation(scene), "");
  scene = generate_scene(1);
  scene.objects.pop_back();
  EXPECT_NE(scene_violation(scene), "");
}

TEST(Render, EmptyCanvasIsBackground) {
  Scene empty;
  const auto img = render(empty);
  EXPECT_EQ(img.shape(), (Shape{64, 64, 3}));
  for (float v : img.vec()) EXPECT_EQ(v, 128.0f / 255.0f);
}

TEST(Render, CenterPixelHasObjectColor) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto scene = generate_scene(s);
    const auto img = render(scene);
    for (const auto& o : scene.objects) {
      const auto row = static_cast<std::size_t>(o.y * 64.0), col = static_cast<std::size_t>(o.x * 64.0);
      // An overlapping square may cover a circle's center; only check centers no other shape can reach.
      bool clear = true;
      for (const auto& other : scene.objects)
        if (&other != &o && std::abs(other.x - o.x) * 64 < 6 && std::abs(other.y - o.y) * 64 < 6) clear = false;
      if (!clear) continue;
      EXPECT_EQ(pixel(img, row, col), as_float(palette()[o.color])) << "seed " << s;
    }
  }
}

TEST(Render, InjectiveOverOneThousandSamples) {
  std::set<std::uint64_t> hashes;
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto img = render(generate_scene(mix_seed(5, i)));
    std::string bytes(reinterpret_cast<const char*>(img.ptr()), img.size() * sizeof(float));
    hashes.insert(io::fnv1a(bytes));
  }
  EXPECT_EQ(hashes.size(), 1000u);
}

TEST(Questions, MirroredLeftAnswersDiffer) {
  auto scene = generate_scene(3);
  scene.objects[0].x = 0.3;
  auto mirrored = scene;
  mirrored.objects[0].x = 0.7;
  EXPECT_EQ(ask(scene, QuestionTemplate::kIsLeft, 0).answer, answers::kYes);
  EXPECT_EQ(ask(mirrored, QuestionTemplate::kIsLeft, 0).answer, answers::kNo);
}

TEST(Questions, AllSameShapeCountsSix) {
  auto scene = generate_scene(4);
  for (auto& o : scene.objects) o.shape = ShapeKind::kCircle;
  const auto qa = ask(scene, QuestionTemplate::kCountSameShape, 2);
  EXPECT_EQ(qa.answer, answers::count(6));
  EXPECT_EQ(answer_vocab()[qa.answer], "6");
  EXPECT_EQ(qa.family, QuestionFamily::kCount);
}

TEST(Questions, TemplatesRenderAsText) {
  const auto scene = generate_scene(5);
  const std::string color(color_names()[scene.objects[0].color]);
  EXPECT_EQ(detokenize(ask(scene, QuestionTemplate::kShapeOf, 0).tokens), "what shape is the " + color + " object ?");
  EXPECT_EQ(detokenize(ask(scene, QuestionTemplate::kFarthestShape, 0).tokens),
            "what shape is the object farthest from the " + color + " object ?");
  for (auto kind : {QuestionTemplate::kShapeOf, QuestionTemplate::kIsLeft, QuestionTemplate::kClosestShape,
                    QuestionTemplate::kFarthestShape, QuestionTemplate::kCountSameShape})
    EXPECT_LE(ask(scene, kind, 1).tokens.size(), kMaxQuestionLength);
  EXPECT_LE(question_vocab().size(), 40u);
  EXPECT_EQ(answer_vocab().size(), kAnswerVocabSize);
  EXPECT_THROW(ask(scene, QuestionTemplate::kShapeOf, 6), ArgumentError);
}

TEST(Questions, ClosestTieGoesToLowerIndex) {
  Scene scene;
  scene.objects = {{ShapeKind::kSquare, 0, 0.5, 0.5}, {ShapeKind::kCircle, 1, 0.7, 0.5}, {ShapeKind::kSquare, 2, 0.3, 0.5},
                   {ShapeKind::kSquare, 3, 0.1, 0.1}, {ShapeKind::kSquare, 4, 0.9, 0.9}, {ShapeKind::kSquare, 5, 0.1, 0.9}};
  EXPECT_EQ(ask(scene, QuestionTemplate::kClosestShape, 0).answer, answers::kCircle);
}

TEST(Questions, TenThousandAgreeWithGeometryOracle) {
  for (std::size_t i = 0; i < 10000; ++i) {
    const auto scene = generate_scene(mix_seed(9, 2 * i));
    const auto qa = make_qa(scene, mix_seed(9, 2 * i + 1));
    const auto expected = hvqa::testing::oracle_answer(scene, qa.tokens);
    ASSERT_TRUE(expected.has_value()) << detokenize(qa.tokens);
    ASSERT_EQ(qa.answer, *expected) << i << ": " << detokenize(qa.tokens);
  }
}

TEST(Questions, NoAnswerDominatesItsFamily) {
  const auto data = generate_dataset(3000, 21);
  std::map<int, std::map<int, int>> counts;
  std::map<int, int> totals;
  for (const auto& s : data.samples) {
    counts[static_cast<int>(s.family)][s.answer]++;
    totals[static_cast<int>(s.family)]++;
  }
  ASSERT_EQ(totals.size(), 3u);
  for (const auto& [family, hist] : counts)
    for (const auto& [answer, n] : hist) EXPECT_LE(n, 0.6 * totals[family]) << family << " " << answer;
}

TEST(Dataset, GenerationIsPureAndThreadIndependent) {
  const auto a = generate_dataset(40, 8, 64, 1), b = generate_dataset(40, 8, 64, 3);
  ASSERT_EQ(a.samples.size(), 40u);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(a.samples[i], b.samples[i]);
    EXPECT_EQ(a.samples[i], generate_sample(8, i));
  }
  EXPECT_EQ(a.header.count, 40u);
  EXPECT_EQ(a.header.question_vocab, question_vocab().size());
}

TEST(Dataset, RoundTripIsBitwise) {
  const auto data = generate_dataset(100, 13);
  const auto p1 = temp_path("rt1.bin"), p2 = temp_path("rt2.bin");
  write_dataset(data, p1);
  const auto back = read_dataset(p1);
  EXPECT_EQ(back.header, data.header);
  ASSERT_EQ(back.samples.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(back.samples[i], data.samples[i]);
  write_dataset(back, p2);
  EXPECT_EQ(io::read_file(p1), io::read_file(p2));
}

TEST(Dataset, EmptyDatasetIsValid) {
  const auto data = generate_dataset(0, 1);
  const auto p = temp_path("empty.bin");
  write_dataset(data, p);
  const auto back = read_dataset(p);
  EXPECT_EQ(back.samples.size(), 0u);
  EXPECT_EQ(back.header, data.header);
}

TEST(Dataset, HeaderLayout) {
  const auto p = temp_path("layout.bin");
  write_dataset(generate_dataset(2, 1), p);
  const auto bytes = io::read_file(p);
  io::ByteReader r(bytes);
  r.expect_magic("HVQA");
  EXPECT_EQ(r.u32(), 1u);   // version
  EXPECT_EQ(r.u32(), 2u);   // count
  EXPECT_EQ(r.u32(), 64u);  // width
  EXPECT_EQ(r.u32(), 64u);  // height
  EXPECT_EQ(r.u32(), 3u);   // channels
  EXPECT_EQ(r.u32(), kMaxQuestionLength);
  EXPECT_EQ(r.u32(), question_vocab().size());
  EXPECT_EQ(r.u32(), kAnswerVocabSize);
  const std::size_t record = 64 * 64 * 3 * 4 + kMaxQuestionLength * 2 + 2 + 1;
  EXPECT_EQ(r.remaining(), 2 * record);
}

TEST(Dataset, TruncatedFileNamesOffset) {
  const auto p = temp_path("trunc.bin");
  write_dataset(generate_dataset(3, 2), p);
  const auto full = fs::file_size(p);
  truncate_file(p, full - 7);
  try {
    read_dataset(p);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 36u);
    EXPECT_LE(e.offset(), full - 7);
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
  truncate_file(p, 10);
  EXPECT_THROW(read_dataset(p), FormatError);
}

TEST(Dataset, BadMagicAndVersion) {
  const auto p = temp_path("bad.bin");
  write_dataset(generate_dataset(1, 2), p);
  auto bytes = io::read_file(p);
  auto corrupt = bytes;
  corrupt[0] = 'X';
  io::write_file(p, corrupt);
  try {
    read_dataset(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  corrupt = bytes;
  corrupt[4] = 9;
  io::write_file(p, corrupt);
  try {
    read_dataset(p);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
  // Trailing garbage is also rejected.
  corrupt = bytes;
  corrupt.push_back(0);
  io::write_file(p, corrupt);
  EXPECT_THROW(read_dataset(p), FormatError);
  EXPECT_THROW(read_dataset(temp_path("missing.bin")), IoError);
}

TEST(Dataset, SummaryCountsSamples) {
  const auto data = generate_dataset(50, 3);
  const auto text = dataset_summary(data);
  EXPECT_NE(text.find("samples 50"), std::string::npos);
  std::istringstream in(text);
  std::string line;
  std::size_t family_total = 0, answer_total = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "family") {
      std::string name;
      std::size_t n;
      ls >> name >> n;
      family_total += n;
    } else if (tag == "answer") {
      std::string fam, name;
      std::size_t n;
      ls >> fam >> name >> n;
      answer_total += n;
    }
  }
  EXPECT_EQ(family_total, 50u);
  EXPECT_EQ(answer_total, 50u);
}

TEST(NormalizeImage, Examples) {
  Rng rng(4);
  Array<float> x({8, 8, 3});
  for (auto& v : x.data()) v = static_cast<float>(rng.uniform());
  const auto n = normalize_image(x);
  double sq = 0.0;
  for (float v : n.vec()) sq += static_cast<double>(v) * v;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  Array<float> twice = x;
  for (auto& v : twice.data()) v *= 2.0f;
  const auto n2 = normalize_image(twice);
  for (std::size_t i = 0; i < n.size(); ++i) EXPECT_NEAR(n2[i], n[i], 1e-6);
  const auto z = normalize_image(Array<float>({2, 2, 3}));
  for (float v : z.vec()) EXPECT_EQ(v, 0.0f);
}

TEST(FeatureMap, ReferenceShapeRoundTrip) {
  Rng rng(6);
  Array<float> map({10, 10, 2048});
  for (auto& v : map.data()) v = static_cast<float>(rng.uniform(-1, 1));
  const auto p = temp_path("fm.bin");
  write_feature_map(map, p);
  const auto back = load_feature_map(p);
  EXPECT_EQ(back, map);
  EXPECT_EQ(fs::file_size(p), 16u + 10 * 10 * 2048 * 4);
}

TEST(FeatureMap, MismatchedPayloadRejected) {
  Array<float> map({2, 3, 4}, 1.0f);
  const auto p = temp_path("fm_bad.bin");
  write_feature_map(map, p);
  truncate_file(p, fs::file_size(p) - 4);
  EXPECT_THROW(load_feature_map(p), FormatError);
  write_feature_map(map, p);
  auto bytes = io::read_file(p);
  bytes.push_back(0);
  io::write_file(p, bytes);
  EXPECT_THROW(load_feature_map(p), FormatError);
}
