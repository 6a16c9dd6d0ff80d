#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dsa/ensemble_heads.hpp"
#include "oracles.hpp"

namespace dsa {
namespace {

using testing::random_tensor;
using testing::uniform_int;

constexpr Variant kAllVariants[] = {Variant::kSingle, Variant::kMhe, Variant::kCbe,
                                    Variant::kSdoas, Variant::kDsa,
                                    Variant::kDsaNoAdapters};

TEST(EnsembleConfig, ChannelArithmeticExamples) {
  const auto c3 = make_ensemble_config(Variant::kDsa, 3, 8, 2);
  EXPECT_EQ(c3.expanded_channels(), 12);
  EXPECT_EQ(c3.shared_channels(), 6);
  const auto c5 = make_ensemble_config(Variant::kCbe, 5, 8, 2);
  EXPECT_EQ(c5.expanded_channels(), 16);
  EXPECT_EQ(make_ensemble_config(Variant::kDsa, 5, 32).private_channels, 4);
  EXPECT_EQ(default_private_channels(7), 1);
}

TEST(EnsembleConfig, AdapterWidthsAndRoster) {
  const auto specs = default_adapter_specs(7, 6);
  EXPECT_EQ(specs[0].hidden_channels, 16);
  EXPECT_EQ(specs[4].hidden_channels, 56);
  EXPECT_EQ(specs[0].activation, nn::ActivationKind::kPReLU);
  EXPECT_EQ(specs[1].activation, nn::ActivationKind::kReLU);
  EXPECT_EQ(specs[2].activation, nn::ActivationKind::kLeakyReLU);
  EXPECT_EQ(specs[3].activation, nn::ActivationKind::kGELU);
  EXPECT_EQ(specs[4].activation, nn::ActivationKind::kELU);
  EXPECT_EQ(specs[5].activation, nn::ActivationKind::kPReLU);
  for (int m = 0; m < 7; ++m) EXPECT_EQ(specs[m].index, m + 1);
}

TEST(EnsembleConfig, RejectsInvalidConfigurations) {
  EXPECT_THROW(make_ensemble_config(Variant::kDsa, 1, 8), ConfigError);
  EXPECT_THROW(make_ensemble_config(Variant::kCbe, 3, 8, 8), ConfigError);
  EXPECT_THROW(make_ensemble_config(Variant::kCbe, 3, 8, 0), ConfigError);
  EXPECT_THROW(make_ensemble_config(Variant::kSingle, 2, 8), ConfigError);

  auto dup = make_ensemble_config(Variant::kSdoas, 3, 8);
  dup.adapters[1] = dup.adapters[0];
  dup.adapters[1].index = 2;
  EXPECT_THROW(dup.validate(), ConfigError);

  auto shrinking = make_ensemble_config(Variant::kDsa, 3, 8);
  shrinking.adapters[2].hidden_channels = shrinking.adapters[1].hidden_channels - 1;
  EXPECT_THROW(shrinking.validate(), ConfigError);

  auto narrow = make_ensemble_config(Variant::kSdoas, 2, 8);
  narrow.adapters[0].hidden_channels = 8;
  EXPECT_THROW(narrow.validate(), ConfigError);

  auto mhe = make_ensemble_config(Variant::kMhe, 2, 8);
  mhe.adapters = default_adapter_specs(2, 8);
  EXPECT_THROW(mhe.validate(), ConfigError);
}

TEST(EnsembleConfig, VariantIdsRoundTrip) {
  std::set<std::string_view> ids;
  for (Variant v : kAllVariants) {
    EXPECT_EQ(parse_variant(variant_id(v)), v);
    ids.insert(variant_id(v));
  }
  EXPECT_EQ(ids.size(), 6u);
  EXPECT_THROW(parse_variant("xyz"), ConfigError);
}

TEST(FeatureExpansion, IdentityKernelCopiesFeature) {
  const auto cfg = make_ensemble_config(Variant::kDsa, 3, 8, 2);
  Rng rng(1);
  FeatureExpansion exp(cfg, rng);
  auto& w = exp.conv().weight().value;
  std::fill(w.begin(), w.end(), 0.0);
  std::fill(exp.conv().bias().value.begin(), exp.conv().bias().value.end(), 0.0);
  for (int c = 0; c < 8; ++c) w[c * 8 + c] = 1.0;
  const Tensor f = random_tensor({1, 8, 4, 4}, rng);
  const Tensor out = expand_features(f, cfg, exp);
  ASSERT_EQ(out.c(), 12);
  for (int c = 0; c < 8; ++c) {
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) EXPECT_EQ(out.at(0, c, y, x), f.at(0, c, y, x));
    }
  }
  EXPECT_THROW(expand_features(random_tensor({1, 7, 4, 4}, rng), cfg, exp), ConfigError);
}

TEST(SplitSharedPrivate, ConstantChannelProbe) {
  const auto cfg = make_ensemble_config(Variant::kCbe, 2, 4, 1);
  Tensor e({1, 5, 2, 2});
  for (int c = 0; c < 5; ++c) {
    for (int i = 0; i < 4; ++i) e.at(0, c, i / 2, i % 2) = c;
  }
  const auto sp = split_shared_private(e, cfg);
  ASSERT_EQ(sp.shared.c(), 3);
  ASSERT_EQ(sp.privates.size(), 2u);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(sp.shared.at(0, c, 1, 1), c);
  EXPECT_EQ(sp.privates[0].at(0, 0, 0, 1), 3.0);
  EXPECT_EQ(sp.privates[1].at(0, 0, 1, 0), 4.0);
}

TEST(SplitSharedPrivate, RoundTripAndShapes) {
  const auto cfg = make_ensemble_config(Variant::kDsa, 3, 8, 2);
  Rng rng(2);
  const Tensor e = random_tensor({2, 12, 3, 3}, rng);
  const auto sp = split_shared_private(e, cfg);
  EXPECT_EQ(sp.shared.c(), 6);
  for (const auto& g : sp.privates) EXPECT_EQ(g.c(), 2);
  const Tensor back = merge_shared_private(sp.shared, sp.privates);
  ASSERT_EQ(back.shape(), e.shape());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(back.data()[i], e.data()[i]);
  EXPECT_THROW(split_shared_private(random_tensor({1, 11, 3, 3}, rng), cfg), ConfigError);
}

TEST(Adapter, ZeroInitEmitsZero) {
  Rng rng(3);
  for (const auto& spec : default_adapter_specs(5, 6)) {
    Adapter a(spec, 6, rng, true);
    const Tensor d = adapter_forward(random_tensor({2, 6, 3, 3}, rng), a);
    for (double v : d.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Adapter, ActivationChangesOutputForSharedWeights) {
  Rng rng(4);
  AdapterSpec relu{1, 16, nn::ActivationKind::kReLU};
  AdapterSpec gelu{1, 16, nn::ActivationKind::kGELU};
  Rng r1(9), r2(9);
  Adapter a(relu, 6, r1, false), b(gelu, 6, r2, false);
  ASSERT_EQ(a.expand().weight().value, b.expand().weight().value);
  ASSERT_EQ(a.restore().weight().value, b.restore().weight().value);
  const Tensor h = random_tensor({1, 6, 4, 4}, rng);
  const Tensor da = adapter_forward(h, a), db = adapter_forward(h, b);
  double diff = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) diff = std::max(diff, std::abs(da.data()[i] - db.data()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(AssembleHeadInputs, VariantExamples) {
  Rng rng(5);
  const Tensor H = random_tensor({1, 6, 2, 2}, rng);
  std::vector<Tensor> G, D, Z;
  for (int m = 0; m < 2; ++m) {
    G.emplace_back(Shape{1, 2, 2, 2}, 10.0 + m);
    D.push_back(random_tensor({1, 6, 2, 2}, rng));
    Z.emplace_back(Shape{1, 6, 2, 2}, 0.0);
  }
  const auto dsa = assemble_head_inputs(Variant::kDsa, 2, H, D, G);
  EXPECT_EQ(dsa[0].c(), 8);

  const auto sdoas = assemble_head_inputs(Variant::kSdoas, 2, H, Z, {});
  for (const auto& f : sdoas) {
    for (std::size_t i = 0; i < H.size(); ++i) EXPECT_EQ(f.data()[i], H.data()[i]);
  }

  const auto cbe = assemble_head_inputs(Variant::kCbe, 2, H, {}, G);
  for (int c = 0; c < 8; ++c) {
    for (int p = 0; p < 4; ++p) {
      const double a = cbe[0].at(0, c, p / 2, p % 2), b = cbe[1].at(0, c, p / 2, p % 2);
      if (c < 6) EXPECT_EQ(a, b);
      else EXPECT_NE(a, b);
    }
  }
  EXPECT_THROW(assemble_head_inputs(Variant::kDsa, 2, H, {}, G), ConfigError);
  EXPECT_THROW(assemble_head_inputs(Variant::kCbe, 2, H, D, {}), ConfigError);
}

// Randomised channel arithmetic and the DSA -> CBE collapse at dH = 0.
TEST(AssembleHeadInputs, RandomConfigsCollapseToCbe) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int cf = uniform_int(rng, 2, 24);
    const int cg = uniform_int(rng, 1, cf - 1);
    const int M = uniform_int(rng, 2, 6);
    const auto cfg = make_ensemble_config(Variant::kDsa, M, cf, cg);
    ASSERT_EQ(cfg.expanded_channels(), cf + (M - 1) * cg);
    ASSERT_EQ(cfg.shared_channels() + M * cg, cfg.expanded_channels());
    const Tensor e = random_tensor({2, cfg.expanded_channels(), 2, 3}, rng);
    const auto sp = split_shared_private(e, cfg);
    std::vector<Tensor> zero(M, Tensor(sp.shared.shape(), 0.0));
    const auto dsa = assemble_head_inputs(Variant::kDsa, M, sp.shared, zero, sp.privates);
    const auto cbe = assemble_head_inputs(Variant::kCbe, M, sp.shared, {}, sp.privates);
    for (int m = 0; m < M; ++m) {
      ASSERT_EQ(dsa[m].c(), cf);
      for (std::size_t i = 0; i < dsa[m].size(); ++i) ASSERT_EQ(dsa[m].data()[i], cbe[m].data()[i]);
    }
  }
}

TEST(Heads, OutputsAreDistributions) {
  Rng rng(7);
  std::vector<Head> heads;
  for (int m = 0; m < 5; ++m) heads.emplace_back(TaskKind::kClassification, 8, 10, 16, m + 1, rng);
  std::vector<Tensor> inputs(5, random_tensor({4, 8, 3, 3}, rng));
  const HeadOutputs out = heads_forward(inputs, heads);
  ASSERT_EQ(out.heads(), 5);
  for (const auto& p : out.predictions) {
    ASSERT_EQ(p.shape(), (Shape{4, 10, 1, 1}));
    for (int n = 0; n < 4; ++n) {
      double s = 0.0;
      for (double v : p.sample(n)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
  EXPECT_NE(out.predictions[0].sample(0)[0], out.predictions[1].sample(0)[0]);
}

TEST(Heads, IdenticalParametersGiveIdenticalOutputs) {
  Rng r1(11), r2(11), rng(8);
  std::vector<Head> heads;
  heads.emplace_back(TaskKind::kClassification, 8, 10, 16, 1, r1);
  heads.emplace_back(TaskKind::kClassification, 8, 10, 16, 1, r2);
  std::vector<Tensor> inputs(2, random_tensor({3, 8, 2, 2}, rng));
  const HeadOutputs out = heads_forward(inputs, heads);
  for (std::size_t i = 0; i < out.predictions[0].size(); ++i) {
    EXPECT_EQ(out.predictions[0].data()[i], out.predictions[1].data()[i]);
  }
}

ModelSpec tiny_spec(Variant v, TaskKind task, int heads) {
  ModelSpec s;
  s.task = task;
  s.outputs = task == TaskKind::kClassification ? 4 : 3;
  s.head_hidden = 6;
  s.zero_init_adapters = false;
  s.backbone = {2, 3, 8, 1};
  s.ensemble = make_ensemble_config(v, v == Variant::kSingle ? 1 : heads, 8, 2);
  return s;
}

// Parameter and private-map gradients of sum_m <w_m, raw_m> + sum_m <v_m, G_m>.
TEST(EnsembleModel, GradientsMatchFiniteDifferences) {
  for (TaskKind task : {TaskKind::kClassification, TaskKind::kKeypoints}) {
    for (Variant v : kAllVariants) {
      SCOPED_TRACE(std::string(variant_id(v)) + "/" + std::string(task_id(task)));
      EnsembleModel model(tiny_spec(v, task, 3), 5);
      Rng rng(12);
      const Tensor x = random_tensor({2, 2, 6, 6}, rng);
      auto t = model.forward(x, true);
      std::vector<Tensor> w, g;
      for (const auto& r : t.raw) w.push_back(random_tensor(r.shape(), rng));
      for (const auto& p : t.privates) g.push_back(random_tensor(p.shape(), rng));
      for (auto* p : model.parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
      model.backward(w, g);

      auto loss = [&] {
        auto tr = model.forward(x, false);
        double s = 0.0;
        for (std::size_t m = 0; m < tr.raw.size(); ++m) {
          for (std::size_t i = 0; i < tr.raw[m].size(); ++i) s += tr.raw[m].data()[i] * w[m].data()[i];
        }
        for (std::size_t m = 0; m < tr.privates.size(); ++m) {
          for (std::size_t i = 0; i < tr.privates[m].size(); ++i) s += tr.privates[m].data()[i] * g[m].data()[i];
        }
        return s;
      };
      int checked = 0, bad = 0;
      for (auto* p : model.parameters()) {
        for (std::size_t i = 0; i < p->size(); i += std::max<std::size_t>(1, p->size() / 5)) {
          const double fd = testing::central_difference(p->value, i, loss, 1e-6);
          if (testing::relative_error(p->grad[i], fd, 1e-5) > 1e-4) {
            ++bad;
            ADD_FAILURE() << p->name << "[" << i << "] analytic " << p->grad[i] << " fd " << fd;
          }
          ++checked;
        }
      }
      EXPECT_GT(checked, 10);
      EXPECT_EQ(bad, 0);
    }
  }
}

TEST(EnsembleModel, DeterministicInitialisationAndCounts) {
  EnsembleModel a(tiny_spec(Variant::kDsa, TaskKind::kClassification, 3), 9);
  EnsembleModel b(tiny_spec(Variant::kDsa, TaskKind::kClassification, 3), 9);
  EnsembleModel c(tiny_spec(Variant::kDsa, TaskKind::kClassification, 3), 10);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value);
    differs |= pa[i]->value != pc[i]->value;
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.adapter_count(), 3);
  EnsembleModel noad(tiny_spec(Variant::kDsaNoAdapters, TaskKind::kClassification, 3), 9);
  EXPECT_EQ(noad.adapter_count(), 0);
  EXPECT_LT(noad.parameter_count(), a.parameter_count());
}

TEST(EnsembleModel, ZeroInitDsaHeadInputsEqualCbeLayout) {
  auto spec = tiny_spec(Variant::kDsa, TaskKind::kClassification, 3);
  spec.zero_init_adapters = true;
  EnsembleModel model(spec, 1);
  Rng rng(2);
  const auto t = model.forward(random_tensor({2, 2, 6, 6}, rng), false);
  const auto cbe = assemble_head_inputs(Variant::kCbe, 3, t.shared, {}, t.privates);
  for (int m = 0; m < 3; ++m) {
    for (std::size_t i = 0; i < cbe[m].size(); ++i) {
      EXPECT_EQ(t.head_inputs[m].data()[i], cbe[m].data()[i]);
    }
  }
}

TEST(EnsembleModel, KeypointHeadsKeepSpatialResolution) {
  EnsembleModel model(tiny_spec(Variant::kMhe, TaskKind::kKeypoints, 2), 3);
  Rng rng(4);
  const auto t = model.forward(random_tensor({1, 2, 8, 8}, rng), false);
  EXPECT_EQ(t.outputs.predictions[0].shape(), (Shape{1, 3, 4, 4}));
}

}  // namespace
}  // namespace dsa
