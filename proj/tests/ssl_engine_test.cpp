#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "dsa/nn.hpp"
#include "dsa/ssl_engine.hpp"
#include "oracles.hpp"

namespace dsa {
namespace {

using testing::random_tensor;
using testing::uniform_int;
using testing::uniform_real;

Tensor row(std::initializer_list<double> v) {
  return Tensor({1, static_cast<int>(v.size()), 1, 1}, std::vector<double>(v));
}

HeadOutputs outputs_of(std::vector<Tensor> p, TaskKind task = TaskKind::kClassification) {
  HeadOutputs h;
  h.task = task;
  h.predictions = std::move(p);
  return h;
}

Tensor one_hot(int K, int k) {
  Tensor t({1, K, 1, 1});
  t.at(0, k, 0, 0) = 1.0;
  return t;
}

HeadOutputs random_probs(int M, int N, int K, Rng& rng, double scale) {
  std::vector<Tensor> p;
  for (int m = 0; m < M; ++m) p.push_back(nn::softmax(random_tensor({N, K, 1, 1}, rng, scale)));
  return outputs_of(std::move(p));
}

TEST(SupervisedLoss, Examples) {
  const int y[] = {0};
  EXPECT_EQ(supervised_loss(outputs_of({one_hot(3, 0), one_hot(3, 0)}), y), 0.0);
  EXPECT_NEAR(supervised_loss(outputs_of({row({0.5, 0.5}), row({0.25, 0.75})}), y),
              1.5 * std::log(2.0), 1e-15);
  const int y7[] = {7};
  const Tensor uniform({1, 10, 1, 1}, 0.1);
  EXPECT_NEAR(supervised_loss(outputs_of({uniform}), y7), std::log(10.0), 1e-14);
}

TEST(SupervisedLoss, RejectsBadLabels) {
  const auto out = outputs_of({row({0.5, 0.5})});
  const int bad[] = {2};
  const int neg[] = {-1};
  const int two[] = {0, 1};
  EXPECT_THROW(supervised_loss(out, bad), InputError);
  EXPECT_THROW(supervised_loss(out, neg), InputError);
  EXPECT_THROW(supervised_loss(out, two), InputError);
}

// d/dz of the loss through the softmax, against central differences on logits.
void check_logit_gradient(std::vector<Tensor> logits,
                          const std::function<LossGrad(const HeadOutputs&)>& f) {
  auto probs = [&] {
    std::vector<Tensor> p;
    for (const auto& z : logits) p.push_back(nn::softmax(z));
    return outputs_of(std::move(p));
  };
  const LossGrad g = f(probs());
  for (std::size_t m = 0; m < logits.size(); ++m) {
    for (std::size_t i = 0; i < logits[m].size(); ++i) {
      const double fd = testing::central_difference(
          logits[m].storage(), i, [&] { return f(probs()).value; }, 1e-5);
      EXPECT_NEAR(g.grad[m].data()[i], fd, 1e-8) << "head " << m << " entry " << i;
    }
  }
}

TEST(SupervisedLoss, LogitGradientMatchesFiniteDifferences) {
  Rng rng(1);
  std::vector<Tensor> z;
  for (int m = 0; m < 3; ++m) z.push_back(random_tensor({4, 5, 1, 1}, rng));
  const std::vector<int> y = {0, 4, 2, 2};
  check_logit_gradient(z, [&](const HeadOutputs& o) { return supervised_loss_with_grad(o, y); });
}

TEST(PseudoLabel, SpecExamples) {
  const ThresholdPolicy tau{0.95};
  const auto none = ensemble_pseudo_label(outputs_of({row({0.5, 0.5}), row({0.9, 0.1})}), tau);
  EXPECT_FALSE(none.valid[0]);
  for (double v : none.targets.values()) EXPECT_EQ(v, 0.0);

  const Tensor p = row({0.97, 0.02, 0.01});
  const auto single = ensemble_pseudo_label(
      outputs_of({p, row({0.4, 0.3, 0.3}), row({0.5, 0.2, 0.3})}), tau);
  EXPECT_TRUE(single.valid[0]);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(single.targets.at(0, c, 0, 0), p.at(0, c, 0, 0) / 3);

  const Tensor e = one_hot(4, 2);
  const Tensor low = row({0.3, 0.3, 0.2, 0.2});
  const auto three = ensemble_pseudo_label(outputs_of({e, low, e, low, e}), tau);
  EXPECT_TRUE(three.valid[0]);
  EXPECT_EQ(three.targets.at(0, 2, 0, 0), 3.0 / 5.0);
  EXPECT_EQ(three.targets.at(0, 0, 0, 0), 0.0);
}

TEST(PseudoLabel, ThresholdIsStrict) {
  const auto at = ensemble_pseudo_label(outputs_of({row({0.95, 0.05}), row({0.95, 0.05})}),
                                        ThresholdPolicy{0.95});
  EXPECT_FALSE(at.valid[0]);
  EXPECT_THROW(ensemble_pseudo_label(outputs_of({row({1, 0})}), ThresholdPolicy{1.0}), ConfigError);
  EXPECT_THROW(ensemble_pseudo_label(outputs_of({row({1, 0})}), ThresholdPolicy{0.0}), ConfigError);
}

TEST(PseudoLabel, RandomMatchesBruteForceAndMaskIsMonotone) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const int M = uniform_int(rng, 1, 5), N = uniform_int(rng, 1, 6), K = uniform_int(rng, 2, 6);
    const auto out = random_probs(M, N, K, rng, 4.0);
    const double tau = uniform_real(rng, 0.2, 0.99);
    const auto pl = ensemble_pseudo_label(out, {tau});
    for (int i = 0; i < N; ++i) {
      bool any = false;
      for (int c = 0; c < K; ++c) {
        double s = 0.0;
        for (int m = 0; m < M; ++m) {
          double mx = 0.0;
          for (int k = 0; k < K; ++k) mx = std::max(mx, out.predictions[m].at(i, k, 0, 0));
          if (mx > tau) {
            s += out.predictions[m].at(i, c, 0, 0) / M;
            any = true;
          }
        }
        EXPECT_NEAR(pl.targets.at(i, c, 0, 0), s, 1e-12);
      }
      EXPECT_EQ(static_cast<bool>(pl.valid[i]), any);
    }
    int prev = N + 1;
    for (double tt = 0.05; tt < 1.0; tt += 0.05) {
      const auto masked = ensemble_pseudo_label(out, {tt});
      EXPECT_LE(masked.valid_count(), prev);
      for (int i = 0; i < N; ++i) {
        if (masked.valid[i]) {
          EXPECT_TRUE(ensemble_pseudo_label(out, {std::max(0.01, tt - 0.05)}).valid[i]);
        }
      }
      prev = masked.valid_count();
    }
  }
}

TEST(PseudoLabel, RenormalizeAndHardModes) {
  const Tensor p = row({0.97, 0.03});
  const auto out = outputs_of({p, row({0.5, 0.5})});
  const auto lit = ensemble_pseudo_label(out, {0.95}, PseudoLabelMode::kLiteral);
  const auto ren = ensemble_pseudo_label(out, {0.95}, PseudoLabelMode::kRenormalize);
  const auto hard = ensemble_pseudo_label(out, {0.95}, PseudoLabelMode::kHard);
  EXPECT_NEAR(lit.targets.at(0, 0, 0, 0), 0.485, 1e-15);
  EXPECT_NEAR(ren.targets.at(0, 0, 0, 0), 0.97, 1e-15);
  EXPECT_EQ(hard.targets.at(0, 0, 0, 0), 1.0);
  EXPECT_EQ(hard.targets.at(0, 1, 0, 0), 0.0);
  for (auto m : {PseudoLabelMode::kLiteral, PseudoLabelMode::kRenormalize, PseudoLabelMode::kHard}) {
    EXPECT_EQ(parse_pseudo_label_mode(pseudo_label_mode_id(m)), m);
  }
}

TEST(EnsembleLoss, SpecExamples) {
  Rng rng(3);
  const auto out = random_probs(3, 4, 5, rng, 1.0);
  const auto masked = ensemble_pseudo_label(out, {0.999});
  ASSERT_EQ(masked.valid_count(), 0);
  const auto g = ensemble_loss_with_grad(out, masked);
  EXPECT_EQ(g.value, 0.0);
  for (const auto& t : g.grad) {
    for (double v : t.values()) EXPECT_EQ(v, 0.0);
  }

  const auto confident = outputs_of({one_hot(3, 1), one_hot(3, 1)});
  EXPECT_EQ(ensemble_loss(confident, ensemble_pseudo_label(confident, {0.95})), 0.0);

  PseudoLabelBatch soft;
  soft.targets = row({0.6, 0.4});
  soft.valid = {1};
  const Tensor u = row({0.5, 0.5});
  EXPECT_NEAR(ensemble_loss(outputs_of({u, u}), soft), std::log(2.0), 1e-15);
}

TEST(EnsembleLoss, LogitGradientTreatsTargetsAsConstants) {
  Rng rng(4);
  for (int t = 0; t < 5; ++t) {
    std::vector<Tensor> z;
    for (int m = 0; m < 3; ++m) z.push_back(random_tensor({5, 4, 1, 1}, rng, 3.0));
    std::vector<Tensor> p;
    for (const auto& l : z) p.push_back(nn::softmax(l));
    const auto pseudo = ensemble_pseudo_label(outputs_of(p), {0.6});
    check_logit_gradient(z, [&](const HeadOutputs& o) { return ensemble_loss_with_grad(o, pseudo); });
  }
}

TEST(EnsembleLoss, NonNegativeAndHeadPermutationInvariant) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const int M = uniform_int(rng, 2, 5);
    auto out = random_probs(M, 6, 4, rng, 3.0);
    const std::vector<int> y = {0, 1, 2, 3, 0, 1};
    const auto pl = ensemble_pseudo_label(out, {0.5});
    const double le = ensemble_loss(out, pl), ll = supervised_loss(out, y);
    EXPECT_GE(le, 0.0);
    EXPECT_GE(ll, 0.0);
    const auto pred = ensemble_infer(out);
    std::shuffle(out.predictions.begin(), out.predictions.end(), rng);
    const auto pl2 = ensemble_pseudo_label(out, {0.5});
    for (std::size_t i = 0; i < pl.targets.size(); ++i) {
      EXPECT_NEAR(pl.targets.data()[i], pl2.targets.data()[i], 1e-15);
    }
    EXPECT_NEAR(ensemble_loss(out, pl2), le, 1e-12);
    EXPECT_NEAR(supervised_loss(out, y), ll, 1e-12);
    EXPECT_EQ(ensemble_infer(out), pred);
  }
}

TEST(EnsembleInfer, Examples) {
  EXPECT_EQ(ensemble_infer(outputs_of({row({0.9, 0.1}), row({0.2, 0.8})}))[0], 0);
  EXPECT_EQ(ensemble_infer(outputs_of({row({0.3, 0.7}), row({0.7, 0.3})}))[0], 0);
  EXPECT_EQ(ensemble_infer(outputs_of({row({0.2, 0.4, 0.4})}))[0], 1);
  Rng rng(6);
  const Tensor p = nn::softmax(random_tensor({10, 6, 1, 1}, rng));
  const auto same = outputs_of({p, p, p});
  EXPECT_EQ(ensemble_infer(same), head_predictions(same, 0));
}

HeadOutputs heatmaps_of(std::vector<Tensor> maps) {
  return outputs_of(std::move(maps), TaskKind::kKeypoints);
}

TEST(HeatmapPseudoLabel, MeansPassingHeadsPerKeypoint) {
  Tensor a({1, 2, 3, 3}, 0.1), b({1, 2, 3, 3}, 0.2);
  a.at(0, 0, 1, 1) = 0.9;  // keypoint 0: only head a passes
  b.at(0, 1, 0, 0) = 0.8;  // keypoint 1: only head b passes
  a.at(0, 1, 2, 2) = 0.7;  // and head a too
  const auto pl = heatmap_pseudo_label(heatmaps_of({a, b}), {0.6});
  EXPECT_EQ(pl.channel_valid, (std::vector<char>{1, 1}));
  EXPECT_EQ(pl.targets.at(0, 0, 1, 1), 0.9);
  EXPECT_EQ(pl.targets.at(0, 0, 0, 0), 0.1);
  EXPECT_NEAR(pl.targets.at(0, 1, 0, 0), (0.1 + 0.8) / 2, 1e-15);
  const auto none = heatmap_pseudo_label(heatmaps_of({a, b}), {0.95});
  EXPECT_EQ(none.valid_count(), 0);
  EXPECT_EQ(heatmap_ensemble_loss_with_grad(heatmaps_of({a, b}), none).value, 0.0);
}

TEST(HeatmapLosses, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  std::vector<Tensor> maps;
  for (int m = 0; m < 2; ++m) maps.push_back(random_tensor({2, 3, 4, 4}, rng));
  const Tensor target = random_tensor({2, 3, 4, 4}, rng);
  PseudoLabelBatch pl;
  pl.targets = target;
  pl.valid = {1, 1};
  pl.channel_valid = {1, 0, 1, 1, 1, 0};
  const auto sup = heatmap_loss_with_grad(heatmaps_of(maps), target);
  const auto ens = heatmap_ensemble_loss_with_grad(heatmaps_of(maps), pl);
  EXPECT_NEAR(sup.value, heatmap_loss(heatmaps_of(maps), target), 1e-15);
  for (int m = 0; m < 2; ++m) {
    for (std::size_t i = 0; i < maps[m].size(); i += 3) {
      const double fs = testing::central_difference(
          maps[m].storage(), i, [&] { return heatmap_loss(heatmaps_of(maps), target); }, 1e-5);
      const double fe = testing::central_difference(
          maps[m].storage(), i,
          [&] { return heatmap_ensemble_loss_with_grad(heatmaps_of(maps), pl).value; }, 1e-5);
      EXPECT_NEAR(sup.grad[m].data()[i], fs, 1e-9);
      EXPECT_NEAR(ens.grad[m].data()[i], fe, 1e-9);
    }
  }
}

TEST(WarpHeatmaps, IdentityAndStrideScaledShift) {
  Rng rng(8);
  const Tensor h = random_tensor({2, 2, 6, 6}, rng);
  const Affine id[] = {Affine{}, Affine{}};
  const Tensor same = warp_heatmaps(h, id, 4);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_EQ(same.data()[i], h.data()[i]);

  // An 8-pixel image shift is a 2-cell heatmap shift at stride 4.
  const Affine shift[] = {Affine{1, 0, 0, 1, 8, 0}, Affine{1, 0, 0, 1, 0, 8}};
  const Tensor w = warp_heatmaps(h, shift, 4);
  EXPECT_NEAR(w.at(0, 1, 3, 4), h.at(0, 1, 3, 2), 1e-12);
  EXPECT_NEAR(w.at(1, 0, 5, 1), h.at(1, 0, 3, 1), 1e-12);
  EXPECT_THROW(warp_heatmaps(h, std::span<const Affine>(id, 1), 4), InputError);
}

struct TinyRun {
  Dataset data;
  ModelSpec spec;
  TrainerOptions opts;
};

TinyRun tiny_run(Variant v) {
  TinyRun r;
  SynthClassificationConfig c;
  c.classes = 4;
  c.image_size = 8;
  c.labeled = 8;
  c.unlabeled = 32;
  c.test = 20;
  r.data = synth_classification(c, 3);
  r.spec.outputs = 4;
  r.spec.head_hidden = 8;
  r.spec.backbone = {3, 4, 8, 1};
  r.spec.ensemble = make_ensemble_config(v, v == Variant::kSingle ? 1 : 3, 8, 2);
  r.opts.batch_size = 4;
  r.opts.mu = 2;
  r.opts.threshold.tau = 0.5;
  r.opts.eval_batch = 7;
  r.opts.probe_size = 5;
  return r;
}

TEST(Trainer, IterationsPerEpoch) {
  auto r = tiny_run(Variant::kDsa);
  EnsembleModel m(r.spec, 1);
  EXPECT_EQ(Trainer(m, r.data, r.opts, 1).iterations_per_epoch(), 4);  // ceil(32 / 8)
  r.opts.supervised_only = true;
  EXPECT_EQ(Trainer(m, r.data, r.opts, 1).iterations_per_epoch(), 2);  // ceil(8 / 4)
}

TEST(Trainer, EpochIsDeterministic) {
  for (Variant v : {Variant::kCbe, Variant::kDsa}) {
    auto r = tiny_run(v);
    EnsembleModel a(r.spec, 5), b(r.spec, 5);
    Trainer ta(a, r.data, r.opts, 5), tb(b, r.data, r.opts, 5);
    const auto ra = ta.train_epoch(0), rb = tb.train_epoch(0);
    EXPECT_EQ(ra.loss_total, rb.loss_total);
    EXPECT_EQ(ra.stream_checksum, rb.stream_checksum);
    EXPECT_EQ(ra.error_rate, rb.error_rate);
    EXPECT_TRUE(std::isfinite(ra.loss_total));
    if (v == Variant::kCbe) EXPECT_NE(ra.loss_lb, 0.0);
    else EXPECT_EQ(ra.loss_lb, 0.0);
  }
}

TEST(Trainer, DataStreamIsSharedAcrossVariants) {
  auto r = tiny_run(Variant::kDsa);
  auto s = tiny_run(Variant::kMhe);
  EnsembleModel a(r.spec, 2), b(s.spec, 2);
  Trainer ta(a, r.data, r.opts, 2), tb(b, s.data, s.opts, 2);
  EXPECT_EQ(ta.train_epoch(0).stream_checksum, tb.train_epoch(0).stream_checksum);
}

TEST(Trainer, ZeroUnlabeledWeightReducesToSupervisedStep) {
  auto r = tiny_run(Variant::kMhe);
  r.opts.lambda_u = 0.0;
  EnsembleModel a(r.spec, 4), b(r.spec, 4);
  Trainer ssl(a, r.data, r.opts, 4);
  auto sup_opts = r.opts;
  sup_opts.supervised_only = true;
  Trainer sup(b, r.data, sup_opts, 4);

  LabeledBatch lb;
  const int idx[] = {0, 1, 2, 3};
  lb.images = r.data.labeled.images.gather(idx);
  lb.labels = {r.data.labeled.labels[0], r.data.labeled.labels[1], r.data.labeled.labels[2],
               r.data.labeled.labels[3]};
  UnlabeledViews uv;
  const int uidx[] = {0, 1, 2, 3, 4, 5, 6, 7};
  uv.weak = r.data.unlabeled.images.gather(uidx);
  uv.strong = uv.weak;
  uv.weak_transforms = uv.strong_transforms = std::vector<Affine>(8);
  uv.weak_flipped = uv.strong_flipped = std::vector<char>(8, 0);
  uv.truth = std::vector<int>(8, -1);
  const auto sa = ssl.step(lb, &uv);
  const auto sb = sup.step(lb, nullptr);
  EXPECT_NEAR(sa.loss_total, sb.loss_total, 1e-12);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i]->size(); ++k) {
      ASSERT_NEAR(pa[i]->value[k], pb[i]->value[k], 1e-12) << pa[i]->name;
    }
  }
}

TEST(Trainer, NonFiniteLossRaisesDivergence) {
  auto r = tiny_run(Variant::kSingle);
  r.opts.supervised_only = true;
  EnsembleModel m(r.spec, 1);
  Trainer t(m, r.data, r.opts, 1);
  auto head = m.head(0).parameters();
  head.back()->value[0] = std::numeric_limits<double>::quiet_NaN();
  LabeledBatch lb;
  const int idx[] = {0};
  lb.images = r.data.labeled.images.gather(idx);
  lb.labels = {0};
  EXPECT_THROW(t.step(lb, nullptr), TrainingDiverged);
}

TEST(Trainer, SingleHeadSimilarityIsTrivial) {
  auto r = tiny_run(Variant::kSingle);
  r.opts.supervised_only = true;
  EnsembleModel m(r.spec, 1);
  Trainer t(m, r.data, r.opts, 1);
  const Evaluation ev = t.evaluate(r.data.test);
  EXPECT_EQ(ev.agreement, 1.0);
  ASSERT_TRUE(ev.error_rate.has_value());
  EXPECT_EQ(*ev.error_rate, ev.head_error_rates[0]);
}

TEST(Trainer, RejectsMismatchedInputs) {
  auto r = tiny_run(Variant::kDsa);
  EnsembleModel m(r.spec, 1);
  EXPECT_THROW(Trainer(m, r.data, r.opts, 1, {0, 1}), InputError);
  EXPECT_THROW(Trainer(m, r.data, r.opts, 1, std::vector<int>(8, 9)), InputError);
  auto bad = r.opts;
  bad.mu = 0;
  EXPECT_THROW(Trainer(m, r.data, bad, 1), ConfigError);
  auto spec = r.spec;
  spec.outputs = 5;
  EnsembleModel wrong(spec, 1);
  EXPECT_THROW(Trainer(wrong, r.data, r.opts, 1), ConfigError);
}

TEST(Trainer, KeypointEpochRuns) {
  SynthKeypointConfig kc;
  kc.image_size = 16;
  kc.labeled = 6;
  kc.unlabeled = 8;
  kc.test = 6;
  const Dataset data = synth_keypoints(kc, 2);
  ModelSpec spec;
  spec.task = TaskKind::kKeypoints;
  spec.outputs = kc.keypoints;
  spec.head_hidden = 8;
  spec.backbone = {3, 4, 8, 2};
  spec.ensemble = make_ensemble_config(Variant::kDsa, 2, 8, 2);
  TrainerOptions opts;
  opts.batch_size = 3;
  opts.mu = 1;
  opts.threshold.tau = 0.3;
  EnsembleModel m(spec, 3);
  Trainer t(m, data, opts, 3);
  EXPECT_EQ(t.stride(), 4);
  EXPECT_EQ(t.heatmap_size(), 4);
  const auto rec = t.train_epoch(0);
  ASSERT_TRUE(rec.mse.has_value());
  EXPECT_GE(*rec.mse, 0.0);
  EXPECT_EQ(rec.pck.size(), 4u);
  EXPECT_FALSE(rec.error_rate.has_value());
}

}  // namespace
}  // namespace dsa
