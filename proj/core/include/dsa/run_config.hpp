#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dsa/data_noise.hpp"
#include "dsa/ensemble_heads.hpp"
#include "dsa/ssl_engine.hpp"

namespace dsa {

struct DataSpec {
  /// Empty: generate synthetic data from the run seed. Otherwise a dataset
  /// directory written by write_dataset.
  std::filesystem::path dir;
  SynthClassificationConfig classification;
  SynthKeypointConfig keypoints;
  double label_noise = 0.0;
};

/// Everything a run needs. Loaded from a sectioned key-value file:
///
///   [task]     kind
///   [data]     dir classes keypoints image_size channels labeled unlabeled
///              test separability label_noise
///   [model]    variant heads feature_channels private_channels width
///              pool_stages head_hidden zero_init_adapters activations
///   [ssl]      tau mu batch_size lambda_u lambda_lb pseudo_label
///              supervised_only heatmap_sigma
///   [optim]    lr momentum nesterov weight_decay
///   [run]      epochs seeds output eval_batch probe_size
///   [ablation] variants
///
/// Unknown sections or keys are rejected.
struct RunConfig {
  TaskKind task = TaskKind::kClassification;
  DataSpec data;
  Variant variant = Variant::kDsa;
  int heads = 5;
  int feature_channels = 32;
  int private_channels = 0;  // 0 selects the default
  int backbone_width = 16;
  int pool_stages = 2;
  int head_hidden = 32;
  bool zero_init_adapters = true;
  std::vector<nn::ActivationKind> activations;  // empty selects the roster
  TrainerOptions trainer;
  int epochs = 30;
  std::vector<std::uint64_t> seeds = {0};
  std::filesystem::path output = "runs/default";
  std::vector<Variant> ablation_variants;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// Model for this config and the given variant (defaults to `variant`).
  ModelSpec model_spec() const;
  ModelSpec model_spec(Variant v) const;

  std::string to_ini() const;
  void write(const std::filesystem::path& file) const;

  /// Parses INI text, applying `overrides` ("section.key=value") on top.
  static RunConfig parse(const std::string& text,
                         const std::vector<std::string>& overrides = {});
  static RunConfig load(const std::filesystem::path& file,
                        const std::vector<std::string>& overrides = {});
};

/// Dataset for one seed: read from `data.dir` or synthesized from a
/// stream derived from the seed.
Dataset make_run_dataset(const RunConfig& cfg, std::uint64_t seed);

/// Labeled-split labels after optional noise injection.
NoisyLabels make_run_labels(const RunConfig& cfg, const Dataset& data,
                            std::uint64_t seed);

}  // namespace dsa
