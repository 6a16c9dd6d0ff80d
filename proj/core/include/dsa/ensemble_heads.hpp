#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "dsa/nn.hpp"
#include "dsa/rng.hpp"
#include "dsa/tensor.hpp"

namespace dsa {

/// Head-input construction scheme.
///   kSingle         one head on the raw backbone feature (plain baseline)
///   kMhe            M heads on the raw backbone feature
///   kCbe            expansion + shared/private split, concat(H, G_m)
///   kSdoas          adapters only, H + dH_m
///   kDsa            expansion + split + adapters, concat(H + dH_m, G_m)
///   kDsaNoAdapters  DSA structure with the adapters removed (ablation row)
enum class Variant { kSingle, kMhe, kCbe, kSdoas, kDsa, kDsaNoAdapters };

std::string_view variant_id(Variant v);
Variant parse_variant(std::string_view id);

enum class TaskKind { kClassification, kKeypoints };

std::string_view task_id(TaskKind t);
TaskKind parse_task(std::string_view id);

struct AdapterSpec {
  int index = 1;            // 1-based head index m
  int hidden_channels = 0;  // C_H + 10 * m
  nn::ActivationKind activation = nn::ActivationKind::kReLU;

  bool operator==(const AdapterSpec&) const = default;
};

/// Expansion width of the m-th adapter.
constexpr int adapter_expansion(int m) { return 10 * m; }

struct EnsembleConfig {
  int heads = 5;              // M
  int feature_channels = 32;  // C_F
  int private_channels = 0;   // C_G, zero when the variant has no split
  Variant variant = Variant::kDsa;
  std::vector<AdapterSpec> adapters;

  bool has_expansion() const;
  bool has_adapters() const;
  bool has_private() const { return has_expansion(); }
  bool uses_lb_loss() const { return variant == Variant::kCbe; }

  /// C_H: C_F - C_G for split variants, C_F otherwise.
  int shared_channels() const;
  /// C_H + M * C_G, identical to C_F + (M - 1) * C_G.
  int expanded_channels() const;
  int head_input_channels() const;

  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

/// max(1, floor(C_F / 8)).
int default_private_channels(int feature_channels);

/// Roster [PReLU, ReLU, LeakyReLU(0.1), GELU, ELU], cycled for M > 5.
std::vector<AdapterSpec> default_adapter_specs(int heads, int shared_channels);

EnsembleConfig make_ensemble_config(Variant variant, int heads,
                                    int feature_channels,
                                    std::optional<int> private_channels = {});

// --------------------------------------------------------------- blocks

/// Learned 1x1 convolution C_F -> C_F + (M - 1) * C_G (with bias).
class FeatureExpansion {
 public:
  FeatureExpansion(const EnsembleConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& features, bool train);
  Tensor backward(const Tensor& grad);
  nn::Conv2d& conv() { return conv_; }
  std::vector<nn::Parameter*> parameters() { return conv_.parameters(); }

 private:
  EnsembleConfig cfg_;
  nn::Conv2d conv_;
};

/// expand_features as a one-shot call with an externally owned expansion.
Tensor expand_features(const Tensor& features, const EnsembleConfig& cfg,
                       FeatureExpansion& expansion);

struct SharedPrivate {
  Tensor shared;                 // H, (N, C_H, h, w)
  std::vector<Tensor> privates;  // G_1..G_M, each (N, C_G, h, w)
};

SharedPrivate split_shared_private(const Tensor& expanded,
                                   const EnsembleConfig& cfg);
/// Inverse of split_shared_private.
Tensor merge_shared_private(const Tensor& shared,
                            std::span<const Tensor> privates);

/// conv1x1 (C_H -> C_H + dc_m), act, conv1x1 (-> C_H), act.
class Adapter {
 public:
  /// With `zero_init_output` the second convolution starts at zero so the
  /// adapter emits act(0) = 0 until it has been trained.
  Adapter(const AdapterSpec& spec, int shared_channels, Rng& rng,
          bool zero_init_output = true);

  Tensor forward(const Tensor& shared, bool train);
  Tensor backward(const Tensor& grad);
  std::vector<nn::Parameter*> parameters();

  const AdapterSpec& spec() const { return spec_; }
  nn::Conv2d& expand() { return expand_; }
  nn::Conv2d& restore() { return restore_; }

 private:
  AdapterSpec spec_;
  int channels_;
  nn::Conv2d expand_;
  nn::Activation act1_;
  nn::Conv2d restore_;
  nn::Activation act2_;
};

Tensor adapter_forward(const Tensor& shared, Adapter& adapter);

/// F_m per variant. `deltas` holds dH_m (SDoAs, DSA); `privates` holds G_m
/// (CBE, DSA, DSA without adapters). MHE/single ignore both and return the
/// shared feature for every head.
std::vector<Tensor> assemble_head_inputs(Variant variant, int heads,
                                         const Tensor& shared,
                                         std::span<const Tensor> deltas,
                                         std::span<const Tensor> privates);

struct HeadOutputs {
  TaskKind task = TaskKind::kClassification;
  /// Per head: class probabilities (N, K, 1, 1) or heatmaps (N, K, h, w).
  std::vector<Tensor> predictions;

  int heads() const { return static_cast<int>(predictions.size()); }
  int batch() const { return predictions.empty() ? 0 : predictions[0].n(); }
  int outputs() const { return predictions.empty() ? 0 : predictions[0].c(); }
  /// Samples [begin, begin + count) of every head.
  HeadOutputs slice(int begin, int count) const;
  void validate() const;
};

/// Classification: global average pool + linear. Keypoints: 1x1 conv,
/// ReLU, 1x1 conv producing one heatmap per keypoint.
class Head {
 public:
  Head(TaskKind task, int in_channels, int outputs, int hidden, int index,
       Rng& rng);

  /// Logits (N, K, 1, 1) or heatmaps (N, K, h, w).
  Tensor forward(const Tensor& x, bool train) { return net_.forward(x, train); }
  Tensor backward(const Tensor& g) { return net_.backward(g); }
  std::vector<nn::Parameter*> parameters() { return net_.parameters(); }
  TaskKind task() const { return task_; }

 private:
  TaskKind task_;
  nn::Sequential net_;
};

/// Runs head m on input m; classification outputs are softmaxed.
HeadOutputs heads_forward(std::span<const Tensor> inputs, std::span<Head> heads,
                          bool train = false);

// ---------------------------------------------------------------- model

struct BackboneSpec {
  int in_channels = 3;
  int width = 16;
  int feature_channels = 32;
  int pool_stages = 2;
};

struct ModelSpec {
  TaskKind task = TaskKind::kClassification;
  int outputs = 10;  // classes or keypoints
  int head_hidden = 32;
  bool zero_init_adapters = true;
  BackboneSpec backbone;
  EnsembleConfig ensemble;

  void validate() const;
};

/// Small CNN trunk: [conv3x3 -> ReLU -> maxpool] x pool_stages, then
/// conv3x3 -> ReLU to `feature_channels`.
nn::Sequential make_backbone(const BackboneSpec& spec, Rng& rng);

class EnsembleModel {
 public:
  struct Trace {
    Tensor feature;                   // backbone output F
    Tensor shared;                    // H (F itself when no split)
    std::vector<Tensor> privates;     // G_m
    std::vector<Tensor> deltas;       // dH_m
    std::vector<Tensor> head_inputs;  // F_m
    std::vector<Tensor> raw;          // logits or heatmaps
    HeadOutputs outputs;
  };

  EnsembleModel(ModelSpec spec, std::uint64_t seed);
  EnsembleModel(const EnsembleModel&) = delete;
  EnsembleModel& operator=(const EnsembleModel&) = delete;

  Trace forward(const Tensor& images, bool train);
  /// Backpropagates gradients w.r.t. each head's raw output and, optionally,
  /// extra gradients w.r.t. the private maps G_m (empty span for none).
  void backward(std::span<const Tensor> grad_raw,
                std::span<const Tensor> grad_privates = {});

  std::vector<nn::Parameter*> parameters();
  std::size_t parameter_count();

  const ModelSpec& spec() const { return spec_; }
  int heads() const { return spec_.ensemble.heads; }
  Adapter& adapter(int m) { return adapters_.at(m); }
  Head& head(int m) { return heads_.at(m); }
  int adapter_count() const { return static_cast<int>(adapters_.size()); }

 private:
  ModelSpec spec_;
  nn::Sequential backbone_;
  std::optional<FeatureExpansion> expansion_;
  std::vector<Adapter> adapters_;
  std::vector<Head> heads_;
};

}  // namespace dsa
