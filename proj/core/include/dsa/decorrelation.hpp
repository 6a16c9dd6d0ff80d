#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dsa/ensemble_heads.hpp"
#include "dsa/tensor.hpp"

namespace dsa {

struct Correlation {
  double value = 0.0;
  /// Set when either input has zero variance; `value` is then 0.
  bool degenerate = false;
};

/// Pearson correlation of two equally sized vectors (two-pass, centered).
Correlation pearson(std::span<const double> a, std::span<const double> b);

/// Pearson correlation of the flattened (C*H*W) feature maps.
Correlation corrcoef_features(const FeatureMap& a, const FeatureMap& b);

class CorrelationMatrix {
 public:
  explicit CorrelationMatrix(int size);

  int size() const { return size_; }
  double at(int i, int j) const { return values_[i * size_ + j]; }
  double& at(int i, int j) { return values_[i * size_ + j]; }
  bool degenerate(int i, int j) const { return degenerate_[i * size_ + j]; }
  void set(int i, int j, Correlation c);

  double mean_off_diagonal() const;
  int degenerate_count() const;
  std::span<const double> values() const { return values_; }

 private:
  int size_;
  std::vector<double> values_;
  std::vector<char> degenerate_;
};

/// Entry (i, j) = corrcoef_features(F_i, F_j).
CorrelationMatrix pairwise_head_correlation(std::span<const FeatureMap> inputs);

/// Sample-averaged pairwise_head_correlation over batched head inputs, each
/// of shape (N, C, h, w).
CorrelationMatrix mean_pairwise_head_correlation(
    std::span<const Tensor> head_inputs);

/// Low-Bias loss over a batch of per-head private maps,
///   L = 1/B * sum_samples 1/M * sum_i sum_{j != i} corrcoef(G_i, G_j).
/// `batch[s][m]` is head m's private map for sample s.
double lb_loss(std::span<const std::vector<FeatureMap>> batch);

struct LbLossResult {
  double value = 0.0;
  /// d value / d G_m, same shape as the inputs.
  std::vector<Tensor> grad;
  int degenerate_pairs = 0;
};

/// Batched form used in training: `privates[m]` is (N, C_G, h, w).
LbLossResult lb_loss_with_grad(std::span<const Tensor> privates);

struct PredictionSimilarity {
  double agreement = 0.0;  // mean pairwise argmax agreement
  double cosine = 0.0;     // mean pairwise cosine of prediction vectors
};

/// For keypoint heatmaps each keypoint's map is treated as one prediction.
PredictionSimilarity prediction_similarity(const HeadOutputs& outputs);

struct LemmaParams {
  int shared_channels = 48;  // C_H
  int private_channels = 8;  // C_G
  int height = 32;
  int width = 32;
  int heads = 2;
  int trials = 1000;
  double delta_ratio = 0.05;  // std of dH relative to std of H
  std::uint64_t seed = 0;

  void validate() const;
};

struct LemmaReport {
  LemmaParams params;
  int trials = 0;
  int resampled = 0;
  double mean_c_dsa = 0.0;
  double mean_c_cbe = 0.0;
  double mean_c_sdoas = 0.0;
  double fraction_lemma1 = 0.0;  // trials with C_DSA <= C_CBE
  double fraction_lemma2 = 0.0;  // trials with C_DSA <= C_SDoAs
  std::vector<double> c_dsa, c_cbe, c_sdoas;  // per trial
};

/// Monte-Carlo comparison of head-input correlations for CBE, SDoAs and DSA
/// under i.i.d. standard normal H, G_m and dH_m = delta_ratio * N(0, 1).
/// Correlations are averaged over head pairs when heads > 2.
LemmaReport lemma_monte_carlo(const LemmaParams& params);

}  // namespace dsa
