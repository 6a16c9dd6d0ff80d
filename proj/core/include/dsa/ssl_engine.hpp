#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dsa/data_noise.hpp"
#include "dsa/ensemble_heads.hpp"
#include "dsa/metrics.hpp"
#include "dsa/nn.hpp"
#include "dsa/tensor.hpp"

namespace dsa {

struct ThresholdPolicy {
  double tau = 0.95;  // 0 < tau < 1

  void validate() const;
};

/// How surviving head predictions are combined into a pseudo-label.
///   kLiteral      (1/M) * sum of passing heads (may sum to < 1)
///   kRenormalize  mean of passing heads only
///   kHard         one-hot argmax of the literal target
enum class PseudoLabelMode { kLiteral, kRenormalize, kHard };

std::string_view pseudo_label_mode_id(PseudoLabelMode m);
PseudoLabelMode parse_pseudo_label_mode(std::string_view id);

struct PseudoLabelBatch {
  /// (N, K, 1, 1) soft class targets or (N, K, h, w) target heatmaps.
  Tensor targets;
  /// Per sample: at least one head passed the threshold.
  std::vector<char> valid;
  /// Keypoint task only, (N * K): channel k of sample i has a target.
  std::vector<char> channel_valid;

  int valid_count() const;
};

/// Loss value plus its gradient w.r.t. each head's raw output (logits or
/// heatmaps), ready for EnsembleModel::backward.
struct LossGrad {
  double value = 0.0;
  std::vector<Tensor> grad;
};

/// 1/N * sum_i 1/M * sum_m -ln p_(i,m)[y_i].
double supervised_loss(const HeadOutputs& outputs, std::span<const int> labels);
LossGrad supervised_loss_with_grad(const HeadOutputs& outputs,
                                   std::span<const int> labels);

/// Heatmap regression: 1/N * sum_i 1/M * sum_m mean squared pixel error.
double heatmap_loss(const HeadOutputs& outputs, const Tensor& targets);
LossGrad heatmap_loss_with_grad(const HeadOutputs& outputs, const Tensor& targets);

/// P_i = (1/M) sum_m 1[max p_(i,m) > tau] p_(i,m) for classification.
PseudoLabelBatch ensemble_pseudo_label(const HeadOutputs& outputs,
                                       const ThresholdPolicy& policy,
                                       PseudoLabelMode mode = PseudoLabelMode::kLiteral);

/// Keypoint analogue: a head's map for keypoint k passes when its peak
/// exceeds tau; the target is the mean of the passing maps.
PseudoLabelBatch heatmap_pseudo_label(const HeadOutputs& outputs,
                                      const ThresholdPolicy& policy);

/// 1/N * sum_i 1/M * sum_m CE(p_(i,m), P_i) with soft-target
/// CE = -sum_c P[c] ln p[c]; masked samples count in N but add nothing.
/// Targets are constants (no gradient flows into them).
double ensemble_loss(const HeadOutputs& outputs, const PseudoLabelBatch& pseudo);
LossGrad ensemble_loss_with_grad(const HeadOutputs& outputs,
                                 const PseudoLabelBatch& pseudo);

/// Keypoint analogue of ensemble_loss over valid channels (squared error).
LossGrad heatmap_ensemble_loss_with_grad(const HeadOutputs& outputs,
                                         const PseudoLabelBatch& pseudo);

/// Argmax of the uniform mean of head probabilities; ties go to the lowest
/// class index.
std::vector<int> ensemble_infer(const HeadOutputs& outputs);
/// Argmax of one head's probabilities.
std::vector<int> head_predictions(const HeadOutputs& outputs, int head);
/// Decoded keypoints of the uniform mean heatmap.
KeypointSet ensemble_infer_keypoints(const HeadOutputs& outputs, int stride);

/// Geometric warp of every channel of (N, K, h, w) heatmaps, given an
/// image-space transform and the heatmap stride.
Tensor warp_heatmaps(const Tensor& heatmaps, std::span<const Affine> transforms,
                     int stride);

// -------------------------------------------------------------- training

struct TrainerOptions {
  int batch_size = 16;  // N_B
  int mu = 4;           // unlabeled-to-labeled batch ratio
  ThresholdPolicy threshold;
  PseudoLabelMode pseudo_label_mode = PseudoLabelMode::kLiteral;
  double lambda_u = 1.0;
  double lambda_lb = 0.01;
  /// No unlabeled stream: per-head supervised training only.
  bool supervised_only = false;
  nn::SgdOptions sgd;
  double heatmap_sigma = 1.0;  // in heatmap pixels
  std::vector<double> pck_thresholds = {0.1, 0.2, 0.3, 0.5};
  int eval_batch = 100;
  int probe_size = 32;

  void validate() const;
};

/// Raised when a loss becomes non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepStats {
  double loss_supervised = 0.0;
  double loss_ensemble = 0.0;
  double loss_lb = 0.0;
  double loss_total = 0.0;
  int unlabeled = 0;
  int masked_in = 0;  // unlabeled samples with a valid pseudo-label
  int pseudo_correct = 0;
  int pseudo_known = 0;  // valid samples whose true label is known
};

struct Evaluation {
  std::optional<double> error_rate;
  std::vector<double> head_error_rates;
  std::optional<double> mean_head_error;
  std::optional<double> mse;
  std::map<double, double> pck;
  double agreement = 0.0;
  double cosine = 0.0;
  double head_correlation = 0.0;
};

struct LabeledBatch {
  Tensor images;
  std::vector<int> labels;  // classification
  Tensor heatmaps;          // keypoints
};

/// Weak and strong views of the same unlabeled samples. Transforms map the
/// original image into each view; `truth` (-1 unknown) feeds diagnostics.
struct UnlabeledViews {
  Tensor weak;
  Tensor strong;
  std::vector<Affine> weak_transforms;
  std::vector<Affine> strong_transforms;
  std::vector<char> weak_flipped;
  std::vector<char> strong_flipped;
  std::vector<int> truth;
};

/// Owns the optimizer and the data stream for one model and one root seed.
/// `labels` overrides the labeled split's labels (e.g. after noise
/// injection); empty means use the split's own.
class Trainer {
 public:
  Trainer(EnsembleModel& model, const Dataset& data, TrainerOptions options,
          std::uint64_t seed, std::vector<int> labels = {});

  /// One optimisation step. `unlabeled` is ignored in supervised-only mode.
  StepStats step(const LabeledBatch& labeled, const UnlabeledViews* unlabeled);

  /// Runs one epoch over freshly drawn, seed-determined batches and
  /// evaluates on the test split.
  MetricsRecord train_epoch(int epoch);
  Evaluation evaluate(const Split& split);

  int iterations_per_epoch() const;
  int heatmap_size() const { return heatmap_size_; }
  int stride() const { return stride_; }
  const TrainerOptions& options() const { return options_; }
  const std::vector<int>& labels() const { return labels_; }

 private:
  LabeledBatch make_labeled_batch(std::span<const int> indices, Rng& rng,
                                  StreamHash& hash) const;
  UnlabeledViews make_unlabeled_views(std::span<const int> indices, Rng& weak_rng,
                                      Rng& strong_rng, StreamHash& hash) const;

  EnsembleModel& model_;
  const Dataset& data_;
  TrainerOptions options_;
  std::uint64_t seed_;
  std::vector<int> labels_;
  nn::Sgd sgd_;
  int stride_ = 1;
  int heatmap_size_ = 1;
};

}  // namespace dsa
