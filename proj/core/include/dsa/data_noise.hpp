#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dsa/ensemble_heads.hpp"
#include "dsa/metrics.hpp"
#include "dsa/rng.hpp"
#include "dsa/tensor.hpp"

namespace dsa {

struct DatasetManifest {
  std::filesystem::path root;
  TaskKind task = TaskKind::kClassification;
  int classes = 0;    // classification
  int keypoints = 0;  // keypoints
  int image_size = 16;
  int channels = 3;
  int labeled = 0;
  int unlabeled = 0;
  int test = 0;
  std::pair<int, int> normalization_pair{0, 1};
  std::vector<std::pair<int, int>> flip_pairs;

  void validate() const;
};

/// One split. Images are (N, C, S, S) in [0, 1]. `labels` holds class ids
/// (-1 when unknown); `keypoints` is used by the keypoint task.
struct Split {
  Tensor images;
  std::vector<int> labels;
  KeypointSet keypoints;

  int size() const { return images.n(); }
};

struct Dataset {
  DatasetManifest manifest;
  Split labeled;
  Split unlabeled;
  Split test;
};

// ------------------------------------------------------------ synthesis

struct SynthClassificationConfig {
  int classes = 10;
  int image_size = 16;
  int channels = 3;
  int labeled = 40;
  int unlabeled = 2000;
  int test = 500;
  /// 1 = every class renders to one fixed image; lower values add position,
  /// size, colour, texture and pixel-noise nuisance.
  double separability = 0.5;

  void validate() const;
};

/// Coloured geometric shapes (one per class) on textured backgrounds. The
/// labeled split is class-balanced. Pixel values are multiples of 1/255.
Dataset synth_classification(const SynthClassificationConfig& cfg,
                             std::uint64_t seed);

struct SynthKeypointConfig {
  int keypoints = 5;
  int image_size = 32;
  int channels = 3;
  int labeled = 30;
  int unlabeled = 70;
  int test = 100;

  void validate() const;
};

/// Face-like landmark layouts under random similarity transforms. Keypoints
/// 0 and 1 are the normalization pair; symmetric landmarks are flip pairs.
Dataset synth_keypoints(const SynthKeypointConfig& cfg, std::uint64_t seed);

/// Gaussian target maps of shape (N, K, heat, heat) for a given stride.
Tensor render_heatmaps(const KeypointSet& keypoints, int heat_size, int stride,
                       double sigma);

// ----------------------------------------------------------- label noise

struct NoisyLabels {
  std::vector<int> labels;
  std::vector<char> flipped;
  int flips = 0;
};

/// Flips exactly floor(rate * N) uniformly chosen labels to a uniformly
/// chosen different class.
NoisyLabels inject_label_noise(std::span<const int> labels, int classes,
                               double rate, std::uint64_t seed);

// ----------------------------------------------------------- corruptions

enum class Corruption { kGaussianNoise, kImpulseNoise, kMotionBlur, kContrast };

std::string_view corruption_id(Corruption c);
Corruption parse_corruption(std::string_view id);

/// Severity ladders (index 0 is severity 1):
///   gaussian_noise  sigma           0.04 0.06 0.08 0.09 0.10
///   impulse_noise   pixel fraction  0.01 0.02 0.03 0.05 0.07
///   motion_blur     kernel length   3 5 7 9 11 (pixels)
///   contrast        scale factor    0.75 0.5 0.4 0.3 0.2
double corruption_parameter(Corruption c, int severity);

/// Values are clipped to [0, 1]. Contrast scales about each image's mean.
Tensor corrupt_images(const Tensor& images, Corruption c, int severity,
                      std::uint64_t seed);

// ---------------------------------------------------------- augmentation

/// 2-D affine map p' = A p + t in pixel coordinates.
struct Affine {
  double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;

  std::pair<double, double> apply(double x, double y) const {
    return {a * x + b * y + tx, c * x + d * y + ty};
  }
  Affine inverse() const;
  /// (this o other)(p) = this(other(p)).
  Affine compose(const Affine& other) const;
  bool is_identity() const;
  static Affine rotation_about(double degrees, double cx, double cy);
};

struct AugmentationPolicy {
  enum class Kind { kWeak, kStrong };
  Kind kind = Kind::kWeak;
  double rotation_deg = 0.0;  // uniform in [-r, r]
  double scale_min = 1.0;
  double scale_max = 1.0;
  double flip_prob = 0.0;
  int crop_padding = 0;       // random translation in [-p, p] pixels
  int intensity_ops_min = 0;  // brightness / contrast / posterize
  int intensity_ops_max = 0;

  void validate() const;
  /// True when every range of `weaker` lies inside this policy's ranges.
  bool contains(const AugmentationPolicy& weaker) const;

  static AugmentationPolicy identity();
  static AugmentationPolicy weak_classification();
  static AugmentationPolicy strong_classification();
  static AugmentationPolicy weak_keypoints();    // +-5 deg, 0.95-1.05, flip
  static AugmentationPolicy strong_keypoints();  // +-30 deg, 0.75-1.25, flip
};

struct AugmentedSample {
  Tensor image;            // (1, C, H, W)
  KeypointSet keypoints;   // (1, K) when keypoints were given
  Affine transform;        // original pixel coords -> augmented pixel coords
  bool flipped = false;
};

/// Bilinear warp with clamp-to-edge sampling: out(p) = in(T^-1 p).
Tensor warp_affine(const Tensor& image, const Affine& transform);

/// Geometric transform (flip, scale, rotation about the centre, translation)
/// and, for policies that request it, intensity ops. Keypoints are mapped
/// with the same transform; on flip the indices of each flip pair swap.
AugmentedSample augment(const Tensor& image, const KeypointSet* keypoints,
                        const AugmentationPolicy& policy,
                        std::span<const std::pair<int, int>> flip_pairs,
                        Rng& rng);
AugmentedSample augment(const Tensor& image, const KeypointSet* keypoints,
                        const AugmentationPolicy& policy,
                        std::span<const std::pair<int, int>> flip_pairs,
                        std::uint64_t seed);

// ------------------------------------------------------------------ I/O

/// Writes `manifest`, `labels.csv` and `images/<split>_<id>.ppm|pgm`.
void write_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& file);
DatasetManifest read_manifest(const std::filesystem::path& file);

/// 8-bit binary PPM (3 channels) or PGM (1 channel) of a (1, C, H, W) image.
void write_pnm(const Tensor& image, const std::filesystem::path& file);
Tensor read_pnm(const std::filesystem::path& file);

}  // namespace dsa
