#include <gtest/gtest.h>

#include "gsgn/models.hpp"

namespace {

using namespace gsgn;
using F = Tensor<float>;

/// Copies every tensor of `src` whose name also exists in `dst`.
template <class A, class B>
std::size_t copy_shared(A& dst, B& src) {
  std::size_t n = 0;
  auto s = named_parameters(src);
  for (auto& [name, t] : named_parameters(dst))
    for (auto& [sname, st] : s)
      if (sname == name) {
        t.assign(st.values());
        ++n;
      }
  return n;
}

TEST(Gsgn, ZeroOutputConvIsIdentity) {
  Gsgn<float> g(ModelConfig::desk(), 3);
  std::mt19937_64 rng(1);
  auto x = F::uniform({2, 3, 16, 16}, rng);
  EXPECT_EQ(g.forward(x).values(), x.values());
}

TEST(Gsgn, OutputShapeMatchesInput) {
  ModelConfig c = ModelConfig::desk();
  c.zero_init_output = false;
  Gsgn<float> g(c, 0);
  std::mt19937_64 rng(2);
  auto y = g.forward(F::uniform({1, 3, 64, 64}, rng));
  EXPECT_EQ(y.shape(), (Shape{1, 3, 64, 64}));
}

TEST(Gsgn, RejectsIndivisibleInput) {
  Gsgn<float> g(ModelConfig::desk(), 0);
  EXPECT_THROW(g.forward(F::zeros({1, 3, 10, 12})), ShapeError);
  EXPECT_THROW(g.forward(F::zeros({1, 4, 8, 8})), ShapeError);
}

TEST(Gsgn, EnhanceClampsToUnitRange) {
  ModelConfig c = ModelConfig::desk();
  c.zero_init_output = false;
  Gsgn<float> g(c, 0);
  for (auto& v : g.output_conv().weight.data()) v = 0.0f;
  for (auto& v : g.output_conv().bias.data()) v = 5.0f;
  auto y = g.enhance(F::full({1, 3, 8, 8}, 0.5f));
  for (float v : y.values()) EXPECT_EQ(v, 1.0f);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Gsgn, SameSeedSameWeights) {
  Gsgn<float> a(ModelConfig::gsgn(), 11), b(ModelConfig::gsgn(), 11), c(ModelConfig::gsgn(), 12);
  auto pa = named_parameters(a), pb = named_parameters(b), pc = named_parameters(c);
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
    any_diff = any_diff || pa[i].second.values() != pc[i].second.values();
  }
  EXPECT_TRUE(any_diff);
}

TEST(Gsgn, CloneIsDeep) {
  Gsgn<float> a(ModelConfig::desk(), 0);
  auto b = a.clone();
  a.output_conv().bias[0] = 1.0f;
  EXPECT_EQ(b.output_conv().bias[0], 0.0f);
}

TEST(Gsgn, AdaptiveNeedsStyle) {
  Gsgn<float> g(ModelConfig::desk(NormMode::adaptive, 3), 0);
  EXPECT_THROW(g.forward(F::zeros({1, 3, 8, 8})), Error);
  EXPECT_THROW(g.forward(F::zeros({1, 3, 8, 8}), F::zeros({2})), ShapeError);
}

TEST(Mapping, ZeroWeightsGiveZeroLatent) {
  std::mt19937_64 rng(0);
  MappingNetwork<float> m(3, 8, 3, rng);
  for (auto& l : m.layers()) {
    for (auto& v : l.weight.data()) v = 0.0f;
    for (auto& v : l.bias.data()) v = 0.0f;
  }
  auto w = m(F(Shape{1, 3}, {1, 0, 0}));
  EXPECT_EQ(w.shape(), (Shape{1, 8}));
  for (float v : w.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Mapping, DistinctStylesGiveDistinctLatents) {
  Gsgn<float> g(ModelConfig::mt_gsgn(3), 5);
  auto w1 = g.map_style(F::from({1, 0, 0})), w2 = g.map_style(F::from({0, 1, 0}));
  EXPECT_EQ(w1.shape(), (Shape{1, 128}));
  EXPECT_NE(w1.values(), w2.values());
}

TEST(AdainHeads, ZeroHeadsGiveUnitScaleZeroShift) {
  Gsgn<float> g(ModelConfig::mt_gsgn(3), 0);
  EXPECT_EQ(g.adain_head_layers().size(), g.site_count());
  auto mods = g.adain_heads(g.map_style(F::from({0, 0, 1})));
  ASSERT_EQ(mods.size(), g.site_count());
  for (const auto& m : mods) {
    for (float v : m.scale.values()) EXPECT_EQ(v, 1.0f);
    for (float v : m.shift.values()) EXPECT_EQ(v, 0.0f);
  }
}

TEST(AdainHeads, RandomHeadsSeparateStyles) {
  Gsgn<float> g(ModelConfig::mt_gsgn(3), 0);
  std::mt19937_64 rng(4);
  for (auto& h : g.adain_head_layers()) h.weight.assign(F::randn(h.weight.shape(), rng, 0.1f).values());
  auto a = g.adain_heads(g.map_style(F::from({1, 0, 0})));
  auto b = g.adain_heads(g.map_style(F::from({0, 1, 0})));
  for (std::size_t s = 0; s < a.size(); ++s) {
    EXPECT_NE(a[s].scale.values(), b[s].scale.values());
    EXPECT_NE(a[s].shift.values(), b[s].shift.values());
  }
}

// Zero-initialized AdaIN heads reproduce the instance-normalized model
// (gamma 1, beta 0) bit-exactly when both share their convolution weights.
TEST(AdainHeads, ZeroHeadsMatchUnconditionedModelBitExactly) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    ModelConfig ci = ModelConfig::gsgn(), ca = ModelConfig::mt_gsgn(3);
    ci.zero_init_output = ca.zero_init_output = false;
    Gsgn<float> inst(ci, seed), mt(ca, seed + 100);
    const std::size_t shared = copy_shared(mt, inst);
    EXPECT_EQ(shared, named_parameters(inst).size() - 2 * inst.site_count());
    std::mt19937_64 rng(seed);
    auto x = F::uniform({2, 3, 16, 16}, rng);
    auto yi = inst.forward(x);
    for (auto z : {F::from({1, 0, 0}), F::from({0.3f, 0.5f, 0.2f})}) EXPECT_EQ(mt.forward(x, z).values(), yi.values());
  }
}

TEST(Critic, ShapesAndZeroHead) {
  Critic<float> d(CriticConfig{}, 0);
  std::mt19937_64 rng(0);
  auto x = F::uniform({3, 3, 32, 32}, rng);
  EXPECT_EQ(d(x).shape(), (Shape{3}));
  for (auto& v : d.head().weight.data()) v = 0.0f;
  const auto scores = d(x);
  for (float v : scores.values()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(d(F::zeros({1, 3, 24, 24})), ShapeError);
}

TEST(Critic, InputGradientIsFinite) {
  Critic<float> d(CriticConfig::desk(), 1);
  std::mt19937_64 rng(1);
  auto x = F::uniform({2, 3, 16, 16}, rng);
  x.set_requires_grad(true);
  auto g = grad(sum(d(x)), {x})[0];
  double norm = 0;
  for (float v : g.values()) {
    ASSERT_TRUE(std::isfinite(v));
    norm += double(v) * v;
  }
  EXPECT_GT(norm, 0.0);
}

TEST(Classifier, OutputsInsideUnitInterval) {
  Classifier<float> c(3, CriticConfig::desk(), 0);
  std::mt19937_64 rng(0);
  auto p = c(F::uniform({4, 3, 16, 16}, rng));
  EXPECT_EQ(p.shape(), (Shape{4, 3}));
  for (float v : p.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(ParameterBudget, DefaultWithinFifteenPercent) {
  const double n = static_cast<double>(count_parameters(ModelConfig::gsgn()));
  EXPECT_NEAR(n, 339000.0, 0.15 * 339000.0);
  const double reduced =
      static_cast<double>(count_parameters(ModelConfig::gsgn_without_global_features_and_instance_norm()));
  EXPECT_NEAR(reduced, 325000.0, 0.15 * 325000.0);
}

TEST(ParameterBudget, AblationLadderOrdered) {
  const auto full = count_parameters(ModelConfig::gsgn());
  const auto no_in = count_parameters(ModelConfig::gsgn_without_instance_norm());
  const auto bare = count_parameters(ModelConfig::gsgn_without_global_features_and_instance_norm());
  EXPECT_LT(bare, no_in);
  EXPECT_LE(no_in, full);
}

TEST(ParameterBudget, FrozenCounts) {
  EXPECT_EQ(count_parameters(ModelConfig::gsgn()), 336099u);
  EXPECT_EQ(count_parameters(ModelConfig::gsgn_without_instance_norm()), 334627u);
  EXPECT_EQ(count_parameters(ModelConfig::gsgn_without_global_features_and_instance_norm()), 332515u);
  EXPECT_EQ(count_parameters(ModelConfig::desk()), 20619u);
}

TEST(ModelConfig, JsonRoundTrip) {
  ModelConfig c = ModelConfig::mt_gsgn(4);
  c.gate_reduction = 2;
  nlohmann::json j = c;
  ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.blocks_per_level = {1, 1};
  EXPECT_THROW(c.validate(), Error);
  c = ModelConfig();
  c.levels = 0;
  EXPECT_THROW(c.validate(), Error);
}

}  // namespace
