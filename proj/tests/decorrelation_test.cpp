#include <gtest/gtest.h>

#include <cmath>

#include "dsa/decorrelation.hpp"
#include "dsa/nn.hpp"
#include "oracles.hpp"

namespace dsa {
namespace {

using testing::oracle_pearson;
using testing::random_tensor;
using testing::uniform_int;

FeatureMap random_map(int c, int h, int w, Rng& rng) {
  return random_tensor({1, c, h, w}, rng).feature_map(0);
}

FeatureMap negated(const FeatureMap& f) {
  FeatureMap out = f;
  for (double& v : out.values()) v = -v;
  return out;
}

TEST(Corrcoef, SelfAndAntiCorrelation) {
  Rng rng(1);
  const FeatureMap f = random_map(3, 4, 4, rng);
  EXPECT_NEAR(corrcoef_features(f, f).value, 1.0, 1e-12);
  EXPECT_NEAR(corrcoef_features(f, negated(f)).value, -1.0, 1e-12);
}

TEST(Corrcoef, HandExampleMatchesOracle) {
  const FeatureMap a(1, 2, 2, {1, 2, 3, 4});
  const FeatureMap b(1, 2, 2, {1, 2, 4, 3});
  const double r = corrcoef_features(a, b).value;
  EXPECT_NEAR(r, oracle_pearson(a.values(), b.values()), 1e-12);
  EXPECT_NEAR(r, 0.8, 1e-12);
}

TEST(Corrcoef, ConstantInputIsFlaggedNotThrown) {
  Rng rng(2);
  const FeatureMap c(2, 3, 3, 0.7);
  const Correlation r = corrcoef_features(c, random_map(2, 3, 3, rng));
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_THROW(corrcoef_features(c, random_map(2, 3, 4, rng)), ConfigError);
}

TEST(Corrcoef, RandomInputsMatchOracle) {
  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const int c = uniform_int(rng, 1, 6), h = uniform_int(rng, 1, 7), w = uniform_int(rng, 2, 7);
    FeatureMap a = random_map(c, h, w, rng);
    FeatureMap b = random_map(c, h, w, rng);
    // Mix in a shared component so correlations span a useful range.
    const double mix = testing::uniform_real(rng, -1.0, 1.0);
    for (std::size_t i = 0; i < a.size(); ++i) b.values()[i] += mix * a.values()[i];
    EXPECT_LE(std::abs(corrcoef_features(a, b).value - oracle_pearson(a.values(), b.values())), 1e-10);
  }
}

TEST(PairwiseHeadCorrelation, KnownMatrices) {
  Rng rng(4);
  const FeatureMap f = random_map(2, 3, 3, rng);
  const std::vector<FeatureMap> same(4, f);
  const auto m = pairwise_head_correlation(same);
  for (double v : m.values()) EXPECT_NEAR(v, 1.0, 1e-12);

  const std::vector<FeatureMap> anti = {f, negated(f)};
  EXPECT_NEAR(pairwise_head_correlation(anti).at(0, 1), -1.0, 1e-12);
  EXPECT_NEAR(pairwise_head_correlation(anti).mean_off_diagonal(), -1.0, 1e-12);
}

TEST(PairwiseHeadCorrelation, RandomMatchesOracleAndInvariants) {
  Rng rng(5);
  for (int t = 0; t < 100; ++t) {
    const int M = uniform_int(rng, 2, 5);
    std::vector<FeatureMap> maps;
    for (int m = 0; m < M; ++m) maps.push_back(random_map(2, 3, 4, rng));
    const auto c = pairwise_head_correlation(maps);
    for (int i = 0; i < M; ++i) {
      EXPECT_NEAR(c.at(i, i), 1.0, 1e-12);
      for (int j = 0; j < M; ++j) {
        EXPECT_LE(std::abs(c.at(i, j) - oracle_pearson(maps[i].values(), maps[j].values())), 1e-10);
        EXPECT_NEAR(c.at(i, j), c.at(j, i), 1e-9);
        EXPECT_LE(std::abs(c.at(i, j)), 1.0 + 1e-9);
      }
    }
  }
}

TEST(PairwiseHeadCorrelation, DegeneracyPropagates) {
  Rng rng(6);
  const std::vector<FeatureMap> maps = {random_map(1, 3, 3, rng), FeatureMap(1, 3, 3, 2.0),
                                        random_map(1, 3, 3, rng)};
  const auto c = pairwise_head_correlation(maps);
  EXPECT_TRUE(c.degenerate(0, 1));
  EXPECT_TRUE(c.degenerate(1, 2));
  EXPECT_FALSE(c.degenerate(0, 2));
  EXPECT_EQ(c.at(1, 0), 0.0);
}

TEST(MeanPairwiseHeadCorrelation, AveragesPerSample) {
  Rng rng(7);
  const Tensor a = random_tensor({3, 2, 3, 3}, rng);
  const Tensor b = random_tensor({3, 2, 3, 3}, rng);
  const Tensor heads[] = {a, b};
  double expect = 0.0;
  for (int s = 0; s < 3; ++s) expect += oracle_pearson(a.sample(s), b.sample(s));
  EXPECT_NEAR(mean_pairwise_head_correlation(heads).at(0, 1), expect / 3.0, 1e-12);
}

std::vector<std::vector<FeatureMap>> to_batch(std::span<const Tensor> privates) {
  std::vector<std::vector<FeatureMap>> batch(privates[0].n());
  for (int s = 0; s < privates[0].n(); ++s) {
    for (const auto& g : privates) batch[s].push_back(g.feature_map(s));
  }
  return batch;
}

std::vector<std::vector<std::vector<double>>> to_vectors(std::span<const Tensor> privates) {
  std::vector<std::vector<std::vector<double>>> out(privates[0].n());
  for (int s = 0; s < privates[0].n(); ++s) {
    for (const auto& g : privates) out[s].emplace_back(g.sample(s).begin(), g.sample(s).end());
  }
  return out;
}

TEST(LbLoss, ClosedFormCases) {
  Rng rng(8);
  const FeatureMap f = random_map(2, 3, 3, rng);
  for (int M : {2, 3, 5}) {
    const std::vector<std::vector<FeatureMap>> batch = {std::vector<FeatureMap>(M, f)};
    EXPECT_NEAR(lb_loss(batch), M - 1.0, 1e-12);
  }
  const std::vector<std::vector<FeatureMap>> anti = {{f, negated(f)}};
  EXPECT_NEAR(lb_loss(anti), -1.0, 1e-12);
  const std::vector<std::vector<FeatureMap>> flat = {{f, FeatureMap(2, 3, 3, 1.0)}};
  EXPECT_EQ(lb_loss(flat), 0.0);
}

TEST(LbLoss, RandomBatchesMatchOracle) {
  Rng rng(9);
  for (int t = 0; t < 100; ++t) {
    const int M = uniform_int(rng, 2, 5), N = uniform_int(rng, 1, 4);
    std::vector<Tensor> g;
    for (int m = 0; m < M; ++m) g.push_back(random_tensor({N, 2, 3, 3}, rng));
    const double oracle = testing::oracle_lb_loss(to_vectors(g));
    EXPECT_LE(std::abs(lb_loss(to_batch(g)) - oracle), 1e-10);
    EXPECT_LE(std::abs(lb_loss_with_grad(g).value - oracle), 1e-10);
  }
}

TEST(LbLoss, GradientMatchesCentralDifferences) {
  Rng rng(10);
  for (int t = 0; t < 10; ++t) {
    const int M = uniform_int(rng, 2, 4), N = uniform_int(rng, 1, 3);
    std::vector<Tensor> g;
    for (int m = 0; m < M; ++m) g.push_back(random_tensor({N, 2, 2, 3}, rng));
    const LbLossResult r = lb_loss_with_grad(g);
    for (int m = 0; m < M; ++m) {
      for (std::size_t i = 0; i < g[m].size(); ++i) {
        const double fd = testing::central_difference(
            g[m].storage(), i, [&] { return lb_loss_with_grad(g).value; }, 1e-4);
        EXPECT_LE(testing::relative_error(r.grad[m].data()[i], fd, 1e-6), 1e-4);
      }
    }
  }
}

TEST(LbLoss, DegeneratePairsContributeNothing) {
  Rng rng(11);
  std::vector<Tensor> g = {random_tensor({2, 1, 3, 3}, rng), Tensor({2, 1, 3, 3}, 0.5)};
  const auto r = lb_loss_with_grad(g);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.degenerate_pairs, 2);
  for (double v : r.grad[0].values()) EXPECT_EQ(v, 0.0);
}

HeadOutputs probs(std::vector<Tensor> p) {
  HeadOutputs h;
  h.predictions = std::move(p);
  return h;
}

TEST(PredictionSimilarity, IdenticalAndOrthogonal) {
  Rng rng(12);
  const Tensor p = nn::softmax(random_tensor({5, 4, 1, 1}, rng));
  const auto same = prediction_similarity(probs({p, p, p}));
  EXPECT_NEAR(same.agreement, 1.0, 1e-12);
  EXPECT_NEAR(same.cosine, 1.0, 1e-12);

  Tensor a({1, 3, 1, 1}), b({1, 3, 1, 1});
  a.at(0, 0, 0, 0) = 1.0;
  b.at(0, 2, 0, 0) = 1.0;
  const auto orth = prediction_similarity(probs({a, b}));
  EXPECT_EQ(orth.agreement, 0.0);
  EXPECT_EQ(orth.cosine, 0.0);
}

TEST(PredictionSimilarity, RandomMatchesBruteForce) {
  Rng rng(13);
  std::vector<Tensor> p;
  for (int m = 0; m < 3; ++m) p.push_back(nn::softmax(random_tensor({8, 6, 1, 1}, rng, 2.0)));
  double agree = 0.0, cos = 0.0;
  int pairs = 0;
  for (int n = 0; n < 8; ++n) {
    for (int i = 0; i < 3; ++i) {
      for (int j = i + 1; j < 3; ++j) {
        int ai = 0, aj = 0;
        double ab = 0, aa = 0, bb = 0;
        for (int k = 0; k < 6; ++k) {
          const double x = p[i].at(n, k, 0, 0), y = p[j].at(n, k, 0, 0);
          if (x > p[i].at(n, ai, 0, 0)) ai = k;
          if (y > p[j].at(n, aj, 0, 0)) aj = k;
          ab += x * y;
          aa += x * x;
          bb += y * y;
        }
        agree += ai == aj;
        cos += ab / std::sqrt(aa * bb);
        ++pairs;
      }
    }
  }
  const auto s = prediction_similarity(probs(p));
  EXPECT_NEAR(s.agreement, agree / pairs, 1e-12);
  EXPECT_NEAR(s.cosine, cos / pairs, 1e-12);
}

TEST(Lemma, ZeroDeltaCollapsesDsaOntoCbe) {
  LemmaParams p;
  p.shared_channels = 6;
  p.private_channels = 2;
  p.height = p.width = 4;
  p.trials = 100;
  p.delta_ratio = 0.0;
  const auto r = lemma_monte_carlo(p);
  ASSERT_EQ(r.c_dsa.size(), 100u);
  for (int t = 0; t < 100; ++t) EXPECT_NEAR(r.c_dsa[t], r.c_cbe[t], 1e-12);
  EXPECT_NEAR(r.mean_c_dsa, r.mean_c_cbe, 1e-12);
}

TEST(Lemma, RejectsInvalidParameters) {
  LemmaParams p;
  p.private_channels = 0;
  EXPECT_THROW(lemma_monte_carlo(p), ConfigError);
  p = {};
  p.trials = 50;
  EXPECT_THROW(lemma_monte_carlo(p), ConfigError);
  p = {};
  p.heads = 1;
  EXPECT_THROW(lemma_monte_carlo(p), ConfigError);
  p = {};
  p.delta_ratio = -0.1;
  EXPECT_THROW(lemma_monte_carlo(p), ConfigError);
}

TEST(Lemma, SmallRunOrderingAndDeterminism) {
  LemmaParams p;
  p.shared_channels = 12;
  p.private_channels = 4;
  p.height = p.width = 8;
  p.trials = 200;
  p.heads = 3;
  const auto a = lemma_monte_carlo(p), b = lemma_monte_carlo(p);
  EXPECT_EQ(a.c_dsa, b.c_dsa);
  EXPECT_LT(a.mean_c_dsa, a.mean_c_cbe);
  EXPECT_LT(a.mean_c_dsa, a.mean_c_sdoas);
  EXPECT_GE(a.fraction_lemma1, 0.0);
  EXPECT_LE(a.fraction_lemma1, 1.0);
  p.seed = 1;
  EXPECT_NE(lemma_monte_carlo(p).c_dsa, a.c_dsa);
}

}  // namespace
}  // namespace dsa
