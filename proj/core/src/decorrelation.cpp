#include "dsa/decorrelation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

#include "dsa/rng.hpp"

namespace dsa {

namespace {

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}


// Centering leaves O(eps * |mean|) residue on a constant vector; anything at
// that level counts as zero variance.
bool negligible_variance(double ss, double mean, std::size_t n) {
  const double floor = 16.0 * std::numeric_limits<double>::epsilon() * std::abs(mean);
  return ss <= static_cast<double>(n) * floor * floor;
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa <= 0.0 || bb <= 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// Centered vector and its squared norm (zero when the variance is negligible).
double center(std::span<const double> v, std::vector<double>& out) {
  const double mu = mean_of(v);
  out.resize(v.size());
  double ss = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = v[i] - mu;
    ss += out[i] * out[i];
  }
  return negligible_variance(ss, mu, v.size()) ? 0.0 : ss;
}

}  // namespace

Correlation pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("pearson: size mismatch");
  if (a.size() < 2) throw ConfigError("pearson: need at least 2 elements");
  const double ma = mean_of(a), mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (negligible_variance(saa, ma, a.size()) || negligible_variance(sbb, mb, b.size())) {
    return {0.0, true};
  }
  const double r = sab / std::sqrt(saa * sbb);
  return {std::clamp(r, -1.0, 1.0), false};
}

Correlation corrcoef_features(const FeatureMap& a, const FeatureMap& b) {
  if (!a.same_shape(b)) throw ConfigError("corrcoef_features: shape mismatch");
  return pearson(a.values(), b.values());
}

CorrelationMatrix::CorrelationMatrix(int size)
    : size_(size),
      values_(static_cast<std::size_t>(size) * size, 0.0),
      degenerate_(static_cast<std::size_t>(size) * size, 0) {}

void CorrelationMatrix::set(int i, int j, Correlation c) {
  values_[i * size_ + j] = c.value;
  degenerate_[i * size_ + j] = c.degenerate ? 1 : 0;
}

double CorrelationMatrix::mean_off_diagonal() const {
  if (size_ < 2) return 0.0;
  double s = 0.0;
  for (int i = 0; i < size_; ++i) {
    for (int j = 0; j < size_; ++j) {
      if (i != j) s += at(i, j);
    }
  }
  return s / (static_cast<double>(size_) * (size_ - 1));
}

int CorrelationMatrix::degenerate_count() const {
  return static_cast<int>(std::count(degenerate_.begin(), degenerate_.end(), 1));
}

CorrelationMatrix pairwise_head_correlation(std::span<const FeatureMap> inputs) {
  const int M = static_cast<int>(inputs.size());
  if (M < 2) throw ConfigError("pairwise_head_correlation: need M >= 2");
  for (const auto& f : inputs) {
    if (!f.same_shape(inputs[0])) {
      throw ConfigError("pairwise_head_correlation: shape mismatch");
    }
  }
  CorrelationMatrix out(M);
  for (int i = 0; i < M; ++i) {
    out.set(i, i, corrcoef_features(inputs[i], inputs[i]));
    for (int j = i + 1; j < M; ++j) {
      const Correlation c = corrcoef_features(inputs[i], inputs[j]);
      out.set(i, j, c);
      out.set(j, i, c);
    }
  }
  return out;
}

CorrelationMatrix mean_pairwise_head_correlation(
    std::span<const Tensor> head_inputs) {
  const int M = static_cast<int>(head_inputs.size());
  if (M < 2) throw ConfigError("pairwise_head_correlation: need M >= 2");
  const int N = head_inputs[0].n();
  CorrelationMatrix acc(M);
  std::vector<int> valid(static_cast<std::size_t>(M) * M, 0);
  for (int s = 0; s < N; ++s) {
    for (int i = 0; i < M; ++i) {
      for (int j = i; j < M; ++j) {
        const Correlation c =
            pearson(head_inputs[i].sample(s), head_inputs[j].sample(s));
        if (c.degenerate) continue;
        acc.at(i, j) += c.value;
        ++valid[i * M + j];
      }
    }
  }
  CorrelationMatrix out(M);
  for (int i = 0; i < M; ++i) {
    for (int j = i; j < M; ++j) {
      const int n = valid[i * M + j];
      const Correlation c = n > 0 ? Correlation{acc.at(i, j) / n, false}
                                  : Correlation{0.0, true};
      out.set(i, j, c);
      out.set(j, i, c);
    }
  }
  return out;
}

double lb_loss(std::span<const std::vector<FeatureMap>> batch) {
  if (batch.empty()) throw ConfigError("lb_loss: empty batch");
  const std::size_t M = batch[0].size();
  if (M < 2) throw ConfigError("lb_loss: need M >= 2");
  double total = 0.0;
  for (const auto& heads : batch) {
    if (heads.size() != M) throw ConfigError("lb_loss: ragged head count");
    double s = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        if (i != j) s += corrcoef_features(heads[i], heads[j]).value;
      }
    }
    total += s / static_cast<double>(M);
  }
  return total / static_cast<double>(batch.size());
}

LbLossResult lb_loss_with_grad(std::span<const Tensor> privates) {
  const int M = static_cast<int>(privates.size());
  if (M < 2) throw ConfigError("lb_loss: need M >= 2");
  const int N = privates[0].n();
  if (N < 1) throw ConfigError("lb_loss: empty batch");
  for (const auto& g : privates) {
    if (!(g.shape() == privates[0].shape())) {
      throw ConfigError("lb_loss: private map shape mismatch");
    }
  }
  LbLossResult out;
  for (const auto& g : privates) out.grad.emplace_back(g.shape());
  const double scale = 1.0 / (static_cast<double>(N) * M);

  std::vector<std::vector<double>> centered(M);
  std::vector<double> sq(M);
  for (int s = 0; s < N; ++s) {
    for (int m = 0; m < M; ++m) sq[m] = center(privates[m].sample(s), centered[m]);
    for (int i = 0; i < M; ++i) {
      for (int j = i + 1; j < M; ++j) {
        if (sq[i] <= 0.0 || sq[j] <= 0.0) {
          ++out.degenerate_pairs;
          continue;
        }
        const auto& a = centered[i];
        const auto& b = centered[j];
        double ab = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) ab += a[k] * b[k];
        const double norm = std::sqrt(sq[i] * sq[j]);
        const double r = ab / norm;
        // Ordered pairs (i, j) and (j, i) both appear in the sum.
        out.value += 2.0 * scale * r;
        auto gi = out.grad[i].sample(s);
        auto gj = out.grad[j].sample(s);
        const double c = 2.0 * scale;
        for (std::size_t k = 0; k < a.size(); ++k) {
          gi[k] += c * (b[k] / norm - r * a[k] / sq[i]);
          gj[k] += c * (a[k] / norm - r * b[k] / sq[j]);
        }
      }
    }
  }
  return out;
}

PredictionSimilarity prediction_similarity(const HeadOutputs& outputs) {
  outputs.validate();
  const int M = outputs.heads();
  if (M < 2) throw ConfigError("prediction_similarity: need M >= 2");
  const Shape& s = outputs.predictions[0].shape();
  // Classification: one K-vector per sample. Keypoints: one h*w map per
  // (sample, keypoint).
  const bool per_keypoint = outputs.task == TaskKind::kKeypoints;
  const int groups = per_keypoint ? s.c : 1;
  const std::size_t len = per_keypoint ? s.plane() : s.sample_size();

  double agree = 0.0, cos = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      for (int i = 0; i < M; ++i) {
        auto pi = outputs.predictions[i].sample(n).subspan(g * len, len);
        for (int j = i + 1; j < M; ++j) {
          auto pj = outputs.predictions[j].sample(n).subspan(g * len, len);
          agree += argmax(pi) == argmax(pj) ? 1.0 : 0.0;
          cos += cosine(pi, pj);
          ++count;
        }
      }
    }
  }
  return {agree / static_cast<double>(count), cos / static_cast<double>(count)};
}

void LemmaParams::validate() const {
  if (private_channels < 1) {
    throw ConfigError(
        "lemma check needs private_channels >= 1 (DSA vs SDoAs is undefined "
        "without private maps)");
  }
  if (shared_channels < 1 || height < 1 || width < 1) {
    throw ConfigError("lemma check needs positive feature dimensions");
  }
  if (heads < 2) throw ConfigError("lemma check needs heads >= 2");
  if (trials < 100) {
    throw ConfigError("lemma check needs trials >= 100, got " +
                      std::to_string(trials));
  }
  if (!(delta_ratio >= 0.0) || !std::isfinite(delta_ratio)) {
    throw ConfigError("delta_ratio must be finite and >= 0");
  }
}

LemmaReport lemma_monte_carlo(const LemmaParams& params) {
  params.validate();
  const int M = params.heads;
  const std::size_t plane = static_cast<std::size_t>(params.height) * params.width;
  const std::size_t nh = plane * params.shared_channels;
  const std::size_t ng = plane * params.private_channels;

  LemmaReport rep;
  rep.params = params;
  rep.trials = params.trials;
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<double> H(nh);
  std::vector<std::vector<double>> G(M, std::vector<double>(ng));
  std::vector<std::vector<double>> D(M, std::vector<double>(nh));
  std::vector<std::vector<double>> cbe(M), sdoas(M), dsa(M);

  for (int t = 0; t < params.trials; ++t) {
    for (int attempt = 0;; ++attempt) {
      Rng rng = make_rng(params.seed, "lemma", (static_cast<std::uint64_t>(t) << 20) + attempt);
      for (double& v : H) v = normal(rng);
      for (auto& g : G) for (double& v : g) v = normal(rng);
      for (auto& d : D) for (double& v : d) v = params.delta_ratio * normal(rng);

      for (int m = 0; m < M; ++m) {
        cbe[m].assign(H.begin(), H.end());
        cbe[m].insert(cbe[m].end(), G[m].begin(), G[m].end());
        sdoas[m].resize(nh);
        for (std::size_t k = 0; k < nh; ++k) sdoas[m][k] = H[k] + D[m][k];
        dsa[m] = sdoas[m];
        dsa[m].insert(dsa[m].end(), G[m].begin(), G[m].end());
      }
      double c_cbe = 0.0, c_sdoas = 0.0, c_dsa = 0.0;
      bool degenerate = false;
      int pairs = 0;
      for (int i = 0; i < M && !degenerate; ++i) {
        for (int j = i + 1; j < M; ++j) {
          const Correlation a = pearson(cbe[i], cbe[j]);
          const Correlation b = pearson(sdoas[i], sdoas[j]);
          const Correlation c = pearson(dsa[i], dsa[j]);
          if (a.degenerate || b.degenerate || c.degenerate) {
            degenerate = true;
            break;
          }
          c_cbe += a.value;
          c_sdoas += b.value;
          c_dsa += c.value;
          ++pairs;
        }
      }
      if (degenerate) {
        ++rep.resampled;
        continue;
      }
      rep.c_cbe.push_back(c_cbe / pairs);
      rep.c_sdoas.push_back(c_sdoas / pairs);
      rep.c_dsa.push_back(c_dsa / pairs);
      break;
    }
  }

  int ok1 = 0, ok2 = 0;
  for (int t = 0; t < params.trials; ++t) {
    rep.mean_c_cbe += rep.c_cbe[t];
    rep.mean_c_sdoas += rep.c_sdoas[t];
    rep.mean_c_dsa += rep.c_dsa[t];
    ok1 += rep.c_dsa[t] <= rep.c_cbe[t] ? 1 : 0;
    ok2 += rep.c_dsa[t] <= rep.c_sdoas[t] ? 1 : 0;
  }
  const double T = params.trials;
  rep.mean_c_cbe /= T;
  rep.mean_c_sdoas /= T;
  rep.mean_c_dsa /= T;
  rep.fraction_lemma1 = ok1 / T;
  rep.fraction_lemma2 = ok2 / T;
  return rep;
}

}  // namespace dsa
