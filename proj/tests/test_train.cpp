#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>

#include "hvqa/binary_io.hpp"
#include "hvqa/train.hpp"
#include "support/gradcheck.hpp"

using namespace hvqa;
using hvqa::testing::check_gradients;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "hvqa_test_train";
  fs::create_directories(dir);
  return dir / name;
}

RunConfig small_config() {
  RunConfig c;
  c.encoder.channels = {4, 8, 8, 8};
  c.encoder.embed_dim = 8;
  c.encoder.lstm_hidden = 16;
  c.model.d = 16;
  c.model.classifier_hidden = {16};
  c.train.batch_size = 8;
  c.train.eval_every = 3;
  c.train.max_steps = 6;
  c.train.lr = 1e-3;
  c.train.plateau_windows = 0;
  return c;
}

const Dataset& small_data() {
  static const Dataset data = generate_dataset(40, 123);
  return data;
}

std::vector<Array<float>> parameter_values(Model<float>& model) {
  std::vector<Array<float>> out;
  for (const auto& p : model.params().all()) out.push_back(p.tensor.value());
  return out;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  const std::vector<std::uint16_t> zero{0};
  Tensor<double> uniform(Array<double>::vector({0.0, 0.0}));
  EXPECT_NEAR(cross_entropy(uniform, zero).item(), std::log(2.0), 1e-12);
  Tensor<double> saturated(Array<double>::vector({30.0, -30.0}));
  EXPECT_NEAR(cross_entropy(saturated, zero).item(), 0.0, 1e-12);
  Tensor<float> huge(Array<float>::vector({1000.0f, 0.0f}));
  EXPECT_TRUE(std::isfinite(cross_entropy(huge, std::vector<std::uint16_t>{1}).item()));
  const std::vector<std::uint16_t> bad{2};
  EXPECT_THROW(cross_entropy(uniform, bad), ArgumentError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Tensor<double> logits(Array<double>({2, 3}, {0.5, -1.0, 2.0, 0.1, 0.2, 0.3}), true);
  const std::vector<std::uint16_t> targets{2, 0};
  backward(cross_entropy(logits, targets));
  const auto grad = logits.grad();
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits.value()[r * 3 + c]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = std::exp(logits.value()[r * 3 + c]) / z;
      EXPECT_NEAR(grad[r * 3 + c], (p - (c == targets[r] ? 1.0 : 0.0)) / 2.0, 1e-12);
    }
  }
  Rng rng(3);
  auto leaf = hvqa::testing::random_leaf({4, 5}, rng, -3, 3);
  const std::vector<std::uint16_t> t{0, 4, 2, 2};
  const auto result = check_gradients([&] { return cross_entropy(leaf, t); }, {leaf}, 20, 5);
  EXPECT_LT(result.max_rel, 1e-4);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ParameterSet<double> params;
  auto w = params.add("w", Array<double>::vector({1.0, -2.0, 3.0}), ParamKind::kWeight);
  backward(sum(mul(w, Tensor<double>(Array<double>::vector({0.5, -7.0, 1e-3})))));
  AdamState<double> state;
  adam_step(params, state, 0.01);
  const auto v = w.value();
  EXPECT_NEAR(v[0], 1.0 - 0.01, 1e-6);
  EXPECT_NEAR(v[1], -2.0 + 0.01, 1e-6);
  EXPECT_NEAR(v[2], 3.0 - 0.01, 1e-4);
}

TEST(Adam, ZeroGradientsLeaveParametersUnchanged) {
  ParameterSet<double> params;
  auto w = params.add("w", Array<double>::vector({1.0, -2.0}), ParamKind::kWeight);
  AdamState<double> state;
  for (int i = 0; i < 10; ++i) {
    params.zero_grad();
    backward(sum(mul(w, Tensor<double>(Array<double>::vector({0.0, 0.0})))));
    adam_step(params, state, 0.1);
  }
  EXPECT_EQ(w.value(), Array<double>::vector({1.0, -2.0}));
}

TEST(Adam, ConvexQuadraticConverges) {
  const std::vector<double> target{0.2, 0.4, -0.7}, curvature{1.0, 2.0, 0.5};
  std::vector<double> start{0.4, 0.2, -0.5};
  ParameterSet<double> params;
  auto w = params.add("w", Array<double>::vector(start), ParamKind::kWeight);
  const Tensor<double> t(Array<double>::vector(target)), a(Array<double>::vector(curvature));
  AdamState<double> state;
  // Reference update written out from the textbook recurrences.
  std::vector<double> ref = start, m(3, 0.0), v(3, 0.0);
  const double lr = 0.03;
  for (int i = 1; i <= 100; ++i) {
    params.zero_grad();
    auto diff = sub(w, t);
    backward(sum(mul(a, mul(diff, diff))));
    adam_step(params, state, lr);
    for (std::size_t j = 0; j < 3; ++j) {
      const double g = 2.0 * curvature[j] * (ref[j] - target[j]);
      m[j] = 0.9 * m[j] + 0.1 * g;
      v[j] = 0.999 * v[j] + 0.001 * g * g;
      const double mh = m[j] / (1 - std::pow(0.9, i)), vh = v[j] / (1 - std::pow(0.999, i));
      ref[j] -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
  }
  double grad_norm = 0.0;
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(w.value()[j], ref[j], 1e-10);
    grad_norm += std::pow(2.0 * curvature[j] * (w.value()[j] - target[j]), 2);
  }
  EXPECT_LT(std::sqrt(grad_norm), 1e-3);
}

TEST(Adam, StateShapeMismatchRejected) {
  ParameterSet<float> params;
  params.add("w", Array<float>({2}), ParamKind::kWeight);
  AdamState<float> state;
  state.init(params);
  state.m[0] = Array<float>({3});
  EXPECT_THROW(adam_step(params, state, 0.1), ShapeError);
}

TEST(WeightPenalty, CoversWeightsOnly) {
  ParameterSet<double> params;
  params.add("w", Array<double>::vector({1.0, 2.0}), ParamKind::kWeight);
  params.add("b", Array<double>::vector({5.0}), ParamKind::kBias);
  params.add("s", Array<double>::vector({3.0}), ParamKind::kNormScale);
  EXPECT_DOUBLE_EQ(weight_penalty(params).item(), 5.0);
}

TEST(Training, SameSeedIsBitIdentical) {
  const auto config = small_config();
  Trainer a(config, small_data()), b(config, small_data());
  a.run();
  b.run();
  ASSERT_EQ(a.metrics().size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.metrics()[i].loss, b.metrics()[i].loss);
    EXPECT_EQ(a.metrics()[i].train_acc, b.metrics()[i].train_acc);
  }
  EXPECT_EQ(parameter_values(a.model()), parameter_values(b.model()));
}

TEST(Training, ZeroLearningRateKeepsLossConstant) {
  auto config = small_config();
  config.train.lr = 0.0;
  config.train.batch_size = 40;  // every step sees the whole set
  config.train.l2 = 0.0;
  Trainer t(config, small_data());
  const double first = t.step();
  for (int i = 0; i < 3; ++i) {
    const double loss = t.step();
    // Batch order changes between epochs, so only the float summation order differs.
    EXPECT_NEAR(loss, first, 1e-4 * first);
  }
}

TEST(Training, CheckpointResumeMatchesUninterruptedRun) {
  const auto config = small_config();
  Trainer full(config, small_data());
  full.run();

  const auto path = temp_path("resume.bin");
  {
    Trainer first(config, small_data());
    for (int i = 0; i < 3; ++i) first.step();
    first.close_window();
    first.save_checkpoint(path);
  }
  Trainer resumed(config, small_data());
  resumed.load_checkpoint(path);
  EXPECT_EQ(resumed.steps_done(), 3u);
  resumed.run();
  ASSERT_EQ(resumed.metrics().size(), full.metrics().size());
  for (std::size_t i = 0; i < full.metrics().size(); ++i) {
    EXPECT_EQ(resumed.metrics()[i].loss, full.metrics()[i].loss);
    EXPECT_EQ(resumed.metrics()[i].train_acc, full.metrics()[i].train_acc);
  }
  EXPECT_EQ(parameter_values(resumed.model()), parameter_values(full.model()));
  ASSERT_EQ(resumed.optimizer().m.size(), full.optimizer().m.size());
  for (std::size_t i = 0; i < full.optimizer().m.size(); ++i) {
    EXPECT_EQ(resumed.optimizer().m[i], full.optimizer().m[i]);
    EXPECT_EQ(resumed.optimizer().v[i], full.optimizer().v[i]);
  }
}

TEST(Training, CheckpointRejectsOtherConfigAndCorruption) {
  const auto config = small_config();
  const auto path = temp_path("other.bin");
  {
    Trainer t(config, small_data());
    t.step();
    t.save_checkpoint(path);
  }
  auto other = config;
  other.model.d = 8;
  Trainer t(other, small_data());
  EXPECT_THROW(t.load_checkpoint(path), ConfigError);
  const auto info = read_checkpoint_info(path);
  EXPECT_EQ(info.config_hash, config.hash());
  EXPECT_EQ(info.step, 1u);
  auto bytes = io::read_file(path);
  bytes[0] = 'X';
  io::write_file(path, bytes);
  EXPECT_THROW(read_checkpoint_info(path), FormatError);
}

TEST(Training, DatasetMismatchIsConfigError) {
  auto config = small_config();
  config.data.width = config.data.height = 128;
  EXPECT_THROW(Trainer(config, small_data()), ConfigError);
  Dataset empty = generate_dataset(0, 1);
  EXPECT_THROW(Trainer(small_config(), empty), ConfigError);
}

TEST(Training, AdaptiveFractionReportedPerEpoch) {
  auto config = small_config();
  config.attention.mode = AttentionMode::kAdaHan;
  config.train.batch_size = 20;
  Trainer t(config, small_data());
  t.run();
  ASSERT_EQ(t.epochs().size(), 3u);
  for (const auto& e : t.epochs()) {
    EXPECT_GT(e.mean_selected_fraction, 0.0);
    EXPECT_LE(e.mean_selected_fraction, 1.0);
  }
  for (const auto& r : t.metrics()) {
    EXPECT_GT(r.mean_selected_fraction, 0.0);
    EXPECT_LE(r.mean_selected_fraction, 1.0);
  }
}

TEST(Evaluate, UntrainedModelIsNoBetterThanConstantGuess) {
  const auto data = generate_dataset(600, 77);
  Model<float> model(preset_config("desk"), 5);
  const auto report = evaluate(model, data, 64);
  std::array<std::size_t, kAnswerVocabSize> freq{};
  for (const auto& s : data.samples) ++freq[s.answer];
  const double best_constant = static_cast<double>(*std::max_element(freq.begin(), freq.end())) / 600.0;
  const double ci = 3.0 * std::sqrt(best_constant * (1 - best_constant) / 600.0);
  EXPECT_LE(report.overall.accuracy(), best_constant + ci);
  EXPECT_EQ(report.overall.total, 600u);
}

TEST(Evaluate, MatchesHandCountOnTenSamples) {
  const auto data = generate_dataset(10, 31);
  Model<float> model(small_config(), 9);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    const std::vector<std::size_t> idx{i};
    const auto out = model.forward(batch_images<float>(data, idx), {data.samples[i].tokens}, Mode::kEval);
    const auto logits = out.logits.value();
    std::size_t best = 0;
    for (std::size_t a = 1; a < kAnswerVocabSize; ++a)
      if (logits[a] > logits[best]) best = a;
    correct += best == data.samples[i].answer;
  }
  const auto report = evaluate(model, data, 3);
  EXPECT_EQ(report.overall.correct, correct);
  std::size_t family_sum = 0;
  for (const auto& f : report.families) family_sum += f.correct;
  EXPECT_EQ(family_sum, correct);
}

TEST(Evaluate, InvariantToRecordOrder) {
  const auto data = generate_dataset(50, 32);
  auto shuffled = data;
  std::reverse(shuffled.samples.begin(), shuffled.samples.end());
  Model<float> model(small_config(), 9);
  EXPECT_EQ(evaluate(model, data, 16).overall.correct, evaluate(model, shuffled, 7).overall.correct);
}

TEST(Metrics, CsvRoundTrip) {
  std::vector<MetricRow> rows{{10, 0.5, 0.25, std::nan(""), 0.25, 12.5}, {20, 0.125, 0.75, 0.5, 1.0, 30.0}};
  const auto text = metrics_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "step,loss,train_acc,eval_acc,mean_selected_fraction,wall_ms");
  const auto back = parse_metrics_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].step, 20u);
  EXPECT_EQ(back[1].loss, 0.125);
  EXPECT_TRUE(std::isnan(back[0].eval_acc));
  EXPECT_EQ(back[0].wall_ms, 12.5);
}

TEST(Timing, HardAttentionStepTimeGrowsWithK) {
  // Pairwise aggregation on an 8x8 grid so the attended set dominates the step.
  auto config = small_config();
  config.encoder.channels = {4, 4, 4};
  config.model.d = 128;
  config.aggregator = AggregatorKind::kPairwise;
  config.train.batch_size = 4;
  const auto data = generate_dataset(16, 9);
  std::vector<double> medians;
  for (std::size_t k : {4, 16, 64}) {
    config.attention.k = k;
    Trainer t(config, data);
    std::vector<double> times;
    for (int i = 0; i < 50; ++i) {
      const auto start = std::chrono::steady_clock::now();
      t.step();
      times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    std::nth_element(times.begin(), times.begin() + 25, times.end());
    medians.push_back(times[25]);
  }
  EXPECT_LT(medians[0], medians[1]);
  EXPECT_LT(medians[1], medians[2]);
}
