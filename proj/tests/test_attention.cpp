#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "hvqa/aggregation.hpp"
#include "hvqa/attention.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace hvqa;
using hvqa::testing::adahan_oracle;
using hvqa::testing::check_gradients;
using hvqa::testing::project;
using hvqa::testing::random_array;
using hvqa::testing::random_leaf;

namespace {

constexpr double kGradTol = 1e-4;

std::vector<Tensor<double>> trainable(const ParameterSet<double>& params) {
  std::vector<Tensor<double>> out;
  for (const auto& p : params.all())
    if (p.trainable()) out.push_back(p.tensor);
  return out;
}

}  // namespace

TEST(FractionToK, RoundsAndClamps) {
  EXPECT_EQ(fraction_to_k(0.16, 100), 16u);
  EXPECT_EQ(fraction_to_k(0.25, 16), 4u);
  EXPECT_EQ(fraction_to_k(1.0, 64), 64u);
  EXPECT_EQ(fraction_to_k(0.001, 16), 1u);
  AttentionConfig c;
  c.fraction = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.fraction = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AdaHan, ThresholdValues) {
  EXPECT_EQ(adahan_threshold(10, 10), 0.01);
  EXPECT_EQ(adahan_threshold(4, 4), 0.0625);
}

TEST(AdaHan, HandSoftmaxExample) {
  std::vector<double> p{2, 0, 0, 0};
  auto s = select_cells_adaptive(std::span<const double>(p), 0.0);
  EXPECT_EQ(s.indices, (std::vector<std::size_t>{0}));
  EXPECT_FALSE(s.fallback);
  EXPECT_EQ(s.tau, 0.25);
}

TEST(AdaHan, UniformPresenceFallsBack) {
  for (std::size_t n : {1u, 4u, 16u, 100u}) {
    std::vector<double> p(n, 0.7);
    auto s = select_cells_adaptive(std::span<const double>(p), 0.0);
    EXPECT_EQ(s.indices, (std::vector<std::size_t>{0}));
    EXPECT_TRUE(s.fallback);
    std::vector<float> pf(n, 0.7f);
    EXPECT_TRUE(select_cells_adaptive(std::span<const float>(pf), 0.0).fallback);
  }
}

TEST(AdaHan, MatchesSoftmaxThresholdOracle) {
  Rng rng(1);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.below(64);
    std::vector<double> p(n);
    if (t % 10 == 0) {
      std::fill(p.begin(), p.end(), rng.uniform(0, 5));
    } else {
      for (auto& v : p) v = rng.uniform(0, 3);
    }
    auto s = select_cells_adaptive(std::span<const double>(p), 0.0);
    ASSERT_EQ(s.indices, adahan_oracle(p)) << "case " << t;
  }
}

TEST(AdaHan, NonUniformAlwaysKeepsArgmax) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(16);
    for (auto& v : p) v = rng.uniform(0, 2);
    auto s = select_cells_adaptive(std::span<const double>(p), 0.0);
    EXPECT_FALSE(s.fallback);
    const auto arg = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
    EXPECT_EQ(s.indices.front(), arg);
  }
}

TEST(Han, FullSelectionSumEqualsDirectSum) {
  Rng rng(3);
  Tensor<double> m(random_array({4, 4, 5}, rng));
  auto sel = select_han(m, l2_norm_map(m), 16);
  EXPECT_EQ(sel.selection.k(), 16u);
  EXPECT_EQ(sum_pool(sel.features).value(), sum_rows(reshape(m, {16, 5})).value());
}

TEST(Han, ScaleMonotonicity) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> p(16);
    for (auto& v : p) v = rng.uniform(0.1, 1);
    const auto before = select_cells_fixed(std::span<const double>(p), 4).indices;
    const std::size_t cell = before[rng.below(4)];
    p[cell] *= 1.0 + rng.uniform(0.01, 3);
    const auto after = select_cells_fixed(std::span<const double>(p), 4).indices;
    EXPECT_NE(std::find(after.begin(), after.end(), cell), after.end());
  }
}

TEST(Han, PermutationEquivariance) {
  Rng rng(5);
  std::vector<double> p(16);
  for (auto& v : p) v = static_cast<double>(rng.below(5));  // ties on purpose
  const auto perm = rng.permutation(16);
  std::vector<double> q(16);
  for (std::size_t i = 0; i < 16; ++i) q[perm[i]] = p[i];
  const auto a = select_cells_fixed(std::span<const double>(p), 6).indices;
  const auto b = select_cells_fixed(std::span<const double>(q), 6).indices;
  std::set<std::size_t> mapped;
  for (auto i : a) mapped.insert(perm[i]);
  // Same presence values are picked; membership can differ only among tied values at the cut.
  std::vector<double> va, vb;
  for (auto i : a) va.push_back(p[i]);
  for (auto i : b) vb.push_back(q[i]);
  EXPECT_EQ(va, vb);
  // Within the permuted order the tie rule applies to the permuted flat index.
  std::vector<std::size_t> order(16);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return q[x] > q[y]; });
  order.resize(6);
  EXPECT_EQ(b, order);
}

TEST(Han, GradientSparsity) {
  Rng rng(6);
  for (std::size_t k : {1u, 4u, 8u}) {
    auto m = random_leaf({4, 4, 6}, rng);
    auto sel = select_han(m, l2_norm_map(m), k);
    backward(project(tanh(sum_pool(sel.features))));
    const std::set<std::size_t> chosen(sel.selection.indices.begin(), sel.selection.indices.end());
    const auto g = m.grad();
    for (std::size_t c = 0; c < 16; ++c)
      for (std::size_t j = 0; j < 6; ++j) {
        if (chosen.count(c)) {
          EXPECT_NE(g[c * 6 + j], 0.0);
        } else {
          EXPECT_EQ(g[c * 6 + j], 0.0);
        }
      }
  }
}

TEST(Han, InvalidK) {
  Rng rng(7);
  Tensor<double> m(random_array({2, 2, 3}, rng));
  EXPECT_THROW(select_han(m, l2_norm_map(m), 5), ArgumentError);
  EXPECT_THROW(select_han(m, l2_norm_map(m), 0), ArgumentError);
}

TEST(Han, SelectedRowsAscending) {
  Tensor<double> m(Array<double>({4, 1}, {1, 4, 3, 2}));
  auto sel = select_han(m, l2_norm_map(m), 2);
  EXPECT_EQ(sel.selection.indices, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(sel.features.value().vec(), (std::vector<double>{4, 3}));
  sel = select_han(m, l2_norm_map(m), 3);
  EXPECT_EQ(sel.selection.indices, (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_EQ(sel.features.value().vec(), (std::vector<double>{4, 3, 2}));
}

TEST(Fusion, AddAndPresence) {
  Tensor<double> x(Array<double>({1, 1, 2}, {1, 2}));
  Tensor<double> q(Array<double>::vector({10, 20}));
  EXPECT_EQ(fuse_add(x, q).value().vec(), (std::vector<double>{11, 22}));
  EXPECT_EQ(fuse_add(x, Tensor<double>(Array<double>({2}))).value(), x.value());
  EXPECT_THROW(fuse_add(x, Tensor<double>(Array<double>({3}))), ShapeError);
  MultimodalMap<double> map{Tensor<double>(Array<double>({1, 1, 3}, {3, 4, 0})), 1, 1, 3, 0};
  EXPECT_EQ(presence(map).value()[0], 5.0);
  MultimodalMap<double> uniform{Tensor<double>(Array<double>({2, 2, 2}, 0.5)), 2, 2, 2, 0};
  const auto pu = presence(uniform).value();
  for (double v : pu.vec()) EXPECT_EQ(v, pu[0]);
}

TEST(Fusion, PresenceIsPermutationEquivariant) {
  Rng rng(8);
  auto m = random_array({9, 4}, rng);
  const auto perm = rng.permutation(9);
  Array<double> pm({9, 4});
  for (std::size_t i = 0; i < 9; ++i)
    for (std::size_t j = 0; j < 4; ++j) pm[perm[i] * 4 + j] = m[i * 4 + j];
  auto p = l2_norm_map(Tensor<double>(m)).value(), pp = l2_norm_map(Tensor<double>(pm)).value();
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(pp[perm[i]], p[i]);
}

TEST(Fusion, AlignmentDepthChangesMap) {
  Rng r0(9), r2(9);
  ParameterSet<double> p0, p2;
  FusionModule<double> shallow(p0, "f", 8, 6, 5, 0, r0);
  FusionModule<double> deep(p2, "f", 8, 6, 5, 2, r2);
  EXPECT_EQ(shallow.alignment_depth(), 0u);
  EXPECT_EQ(deep.alignment_depth(), 2u);
  Rng rng(10);
  Tensor<double> x(random_array({2, 2, 8}, rng)), q(random_array({6}, rng));
  auto a = shallow.fuse(shallow.embed_image(x), shallow.embed_question(q));
  auto b = deep.fuse(deep.embed_image(x), deep.embed_question(q));
  EXPECT_EQ(a.m.shape(), (Shape{2, 2, 5}));
  EXPECT_EQ(a.w, 2u);
  EXPECT_NE(a.m.value(), b.m.value());
}

TEST(Fusion, ZeroQuestionZeroEmbedding) {
  Rng rng(11);
  ParameterSet<double> params;
  FusionModule<double> f(params, "f", 8, 6, 5, 2, rng);
  EXPECT_EQ(f.embed_question(Tensor<double>(Array<double>({6}))).value(), Array<double>({5}));
}

TEST(Fusion, GradientChecks) {
  Rng rng(12);
  ParameterSet<double> params;
  FusionModule<double> f(params, "f", 8, 6, 5, 2, rng);
  for (auto& p : params.all())
    if (p.kind == ParamKind::kBias) p.tensor.mutable_value() = random_array(p.tensor.shape(), rng, 0.0, 0.5);
  auto x = random_leaf({4, 4, 8}, rng), q = random_leaf({6}, rng);
  auto leaves = trainable(params);
  leaves.push_back(x);
  auto r = check_gradients([&] { return project(f.embed_image(x)); }, leaves, 20, 13);
  EXPECT_LT(r.max_rel, kGradTol) << r.worst;
  leaves.push_back(q);
  r = check_gradients([&] { return project(f.embed_question(q)); }, leaves, 20, 14);
  EXPECT_LT(r.max_rel, kGradTol) << r.worst;
  r = check_gradients([&] { return project(presence(f.fuse(f.embed_image(x), f.embed_question(q)))); }, leaves, 20, 15);
  EXPECT_LT(r.max_rel, kGradTol) << r.worst;
}

TEST(Fusion, BatchMatchesSingle) {
  Rng rng(16);
  ParameterSet<double> params;
  FusionModule<double> f(params, "f", 3, 4, 5, 2, rng);
  Tensor<double> x(random_array({8, 3}, rng)), q(random_array({2, 4}, rng));
  auto batch = f.fuse_batch(f.embed_image(x), f.embed_question(q), 2, 2).m.value();
  for (std::size_t b = 0; b < 2; ++b) {
    auto xb = slice_rows(x, b * 4, b * 4 + 4);
    auto qb = reshape(slice_rows(q, b, b + 1), {4});
    auto single = f.fuse(reshape(f.embed_image(xb), {2, 2, 5}), f.embed_question(qb)).m.value();
    for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(batch[b * 20 + i], single[i], 1e-14);
  }
}

TEST(SoftAttention, WeightsSumToOne) {
  Rng rng(17);
  ParameterSet<double> params;
  SoftAttention<double> soft(params, "s", 6, 2, rng);
  Tensor<double> m(random_array({9, 6}, rng)), q(random_array({6}, rng));
  std::vector<Tensor<double>> weights;
  soft.forward(m, q, &weights);
  ASSERT_EQ(weights.size(), 2u);
  for (const auto& w : weights) {
    double total = 0.0;
    for (double v : w.value().vec()) {
      EXPECT_GT(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(SoftAttention, SingleCellAndUniformScores) {
  Rng rng(18);
  ParameterSet<double> params;
  SoftAttention<double> soft(params, "s", 4, 2, rng);
  Tensor<double> one(random_array({1, 4}, rng)), q(random_array({4}, rng));
  auto pooled = soft.forward(one, q).value();
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(pooled[j], one.value()[j], 1e-15);
  // Zero scoring vectors give uniform weights, so the pooled vector is the cell mean.
  for (auto& p : params.all())
    if (p.name.find(".score") != std::string::npos) p.tensor.mutable_value().fill(0.0);
  Tensor<double> m(random_array({5, 4}, rng));
  pooled = soft.forward(m, q).value();
  for (std::size_t j = 0; j < 4; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 5; ++i) mean += m.value()[i * 4 + j] / 5.0;
    EXPECT_NEAR(pooled[j], mean, 1e-12);
  }
}

TEST(SoftAttention, GradientCheck) {
  Rng rng(19);
  ParameterSet<double> params;
  SoftAttention<double> soft(params, "s", 6, 2, rng);
  auto m = random_leaf({9, 6}, rng), q = random_leaf({6}, rng);
  auto leaves = trainable(params);
  leaves.push_back(m);
  leaves.push_back(q);
  auto r = check_gradients([&] { return project(soft.forward(m, q)); }, leaves, 20, 20);
  EXPECT_LT(r.max_rel, kGradTol) << r.worst;
}

TEST(StraightThrough, MaskExampleAndHardMasking) {
  Rng rng(21);
  ParameterSet<double> params;
  StraightThroughGate<double> gate(params, "g", 3, GateNormalizer::kSigmoid, rng);
  // Wire the scorer so f(x) = x[0] - 5, then pick x[0] to hit the target gates.
  auto w1t = params.find("g.f.0.weight")->tensor, w2t = params.find("g.f.1.weight")->tensor;
  auto b2t = params.find("g.f.1.bias")->tensor;
  auto& w1 = w1t.mutable_value();
  auto& w2 = w2t.mutable_value();
  w1.fill(0.0);
  w1[0] = 1.0;  // hidden unit 0 reads feature 0
  w2.fill(0.0);
  w2[0] = 1.0;
  const std::vector<double> target{0.9, 0.2, 0.8, 0.1};
  Array<double> x({4, 3}, 0.5);
  for (std::size_t i = 0; i < 4; ++i) x[i * 3] = std::log(target[i] / (1 - target[i])) + 5.0;
  b2t.mutable_value()[0] = -5.0;
  auto out = gate.forward(Tensor<double>(x), 2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.gate.value()[i], target[i], 1e-12);
  EXPECT_EQ(out.mask.vec(), (std::vector<double>{1, 0, 1, 0}));
  // Forward equals hard masking bitwise.
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out.output.value()[i * 3 + j], x[i * 3 + j] * out.mask[i]);
}

TEST(StraightThrough, ExactlyKRowsAndErrors) {
  Rng rng(22);
  ParameterSet<double> params;
  StraightThroughGate<double> gate(params, "g", 4, GateNormalizer::kSoftmax, rng);
  Tensor<double> x(random_array({3 * 16, 4}, rng));
  auto out = gate.forward_batch(x, 16, 5);
  for (std::size_t b = 0; b < 3; ++b) {
    double kept = 0.0;
    for (std::size_t i = 0; i < 16; ++i) kept += out.mask[b * 16 + i];
    EXPECT_EQ(kept, 5.0);
  }
  // Tied gates (all-equal rows) still keep exactly k.
  Tensor<double> same(Array<double>({16, 4}, 0.3));
  double kept = 0.0;
  const auto tied = gate.forward(same, 4);
  for (double v : tied.mask.vec()) kept += v;
  EXPECT_EQ(kept, 4.0);
  EXPECT_THROW(gate.forward(same, 0), ArgumentError);
  EXPECT_THROW(gate.forward(same, 17), ArgumentError);
}

TEST(StraightThrough, UnkeptRowsReachScorerGradient) {
  Rng rng(23);
  for (auto mu : {GateNormalizer::kSigmoid, GateNormalizer::kSoftmax}) {
    ParameterSet<double> params;
    StraightThroughGate<double> gate(params, "g", 6, mu, rng);
    for (auto& p : params.all())
      if (p.kind == ParamKind::kBias) p.tensor.mutable_value() = random_array(p.tensor.shape(), rng, 0.1, 0.5);
    auto x = random_leaf({8, 6}, rng);
    auto out = gate.forward(x, 3);
    backward(project(out.output));
    // The gate is dense: every row, kept or not, has a gradient through g.
    const auto gx = x.grad();
    for (std::size_t i = 0; i < 8; ++i) {
      if (out.mask[i] != 0.0) continue;
      double norm = 0.0;
      for (std::size_t j = 0; j < 6; ++j) norm += std::abs(gx[i * 6 + j]);
      EXPECT_GT(norm, 0.0) << "row " << i;
    }
    // Surrogate gradient: finite differences on x * (g + c) with c = stop(mask - g) frozen.
    const Array<double> frozen = [&] {
      Array<double> c({8});
      for (std::size_t i = 0; i < 8; ++i) c[i] = out.mask[i] - out.gate.value()[i];
      return c;
    }();
    auto leaves = trainable(params);
    auto surrogate = [&] {
      auto g = gate.forward(x, 3).gate;
      return project(scale_rows(x, add(g, Tensor<double>(frozen))));
    };
    auto r = check_gradients(surrogate, leaves, 20, 24);
    EXPECT_LT(r.max_rel, kGradTol) << r.worst;
    for (auto& p : leaves) p.zero_grad();
    backward(project(gate.forward(x, 3).output));
    std::vector<Array<double>> st;
    for (auto& p : leaves) st.push_back(p.grad());
    for (auto& p : leaves) p.zero_grad();
    backward(surrogate());
    for (std::size_t i = 0; i < leaves.size(); ++i)
      for (std::size_t j = 0; j < st[i].size(); ++j) EXPECT_NEAR(st[i][j], leaves[i].grad()[j], 1e-12);
  }
}
