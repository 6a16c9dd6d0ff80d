#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dsa/tensor.hpp"

namespace dsa {

/// Keypoint coordinates laid out as (images, keypoints, 2) with (x, y) in
/// pixels, origin top-left, x right, y down.
struct KeypointSet {
  int images = 0;
  int keypoints = 0;
  std::vector<double> xy;

  KeypointSet() = default;
  KeypointSet(int images_, int keypoints_)
      : images(images_),
        keypoints(keypoints_),
        xy(static_cast<std::size_t>(images_) * keypoints_ * 2, 0.0) {}

  double& x(int i, int k) { return xy[(static_cast<std::size_t>(i) * keypoints + k) * 2]; }
  double& y(int i, int k) { return xy[(static_cast<std::size_t>(i) * keypoints + k) * 2 + 1]; }
  double x(int i, int k) const { return xy[(static_cast<std::size_t>(i) * keypoints + k) * 2]; }
  double y(int i, int k) const { return xy[(static_cast<std::size_t>(i) * keypoints + k) * 2 + 1]; }
  KeypointSet gather(std::span<const int> indices) const;
};

struct PckSpec {
  double threshold = 0.2;  // T in (0, 1]
  int pair_a = 0;          // normalization keypoints
  int pair_b = 1;

  void validate(int keypoints) const;
};

double error_rate(std::span<const int> predictions, std::span<const int> labels);

/// Mean Euclidean distance per keypoint.
double keypoint_mse(const KeypointSet& pred, const KeypointSet& gt);

struct PckResult {
  double value = 0.0;
  /// Images skipped because their normalization distance was zero.
  int excluded_images = 0;
};

/// Fraction of keypoints with d / l <= T, pooled over all images.
PckResult pck(const KeypointSet& pred, const KeypointSet& gt, const PckSpec& spec);

/// Argmax decode with a quarter-pixel shift toward the larger neighbour,
/// mapped back to image pixels for the given heatmap stride.
KeypointSet decode_heatmaps(const Tensor& heatmaps, int stride);

/// Heatmap-space coordinate of an image-space coordinate.
inline double image_to_heatmap(double v, int stride) {
  return (v - 0.5 * (stride - 1)) / stride;
}
inline double heatmap_to_image(double v, int stride) {
  return v * stride + 0.5 * (stride - 1);
}

struct MetricsRecord {
  int epoch = 0;
  std::uint64_t seed = 0;
  double loss_supervised = 0.0;
  double loss_ensemble = 0.0;
  double loss_lb = 0.0;
  double loss_total = 0.0;
  double mask_rate = 0.0;
  std::optional<double> pseudo_label_accuracy;
  std::optional<double> error_rate;
  std::vector<double> head_error_rates;
  std::optional<double> mean_head_error;
  std::optional<double> mse;
  std::map<double, double> pck;  // T -> value
  double head_correlation = 0.0;
  double agreement = 0.0;
  double cosine = 0.0;
  std::uint64_t stream_checksum = 0;
  double seconds = 0.0;

  /// Single-line JSON record.
  std::string to_json() const;
  static MetricsRecord from_json(const std::string& line);
  /// Flattened scalar metrics keyed by name (used for aggregation).
  std::map<std::string, double> scalars() const;
};

struct MetricSummary {
  std::string metric;
  double mean = 0.0;
  std::optional<double> stddev;  // absent for a single seed
  int seeds = 0;
};

/// Mean and sample standard deviation per metric across seeds.
std::vector<MetricSummary> aggregate_runs(std::span<const MetricsRecord> records);
std::vector<MetricSummary> aggregate_values(
    const std::map<std::string, std::vector<double>>& values);

/// CSV with columns metric,mean,std,seeds (std empty when absent).
std::string summary_csv(std::span<const MetricSummary> rows);

}  // namespace dsa
