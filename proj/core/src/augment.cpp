#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "dsa/data_noise.hpp"

namespace dsa {

Affine Affine::inverse() const {
  const double det = a * d - b * c;
  if (std::abs(det) < 1e-12) throw InputError("affine transform is singular");
  Affine r;
  r.a = d / det;
  r.b = -b / det;
  r.c = -c / det;
  r.d = a / det;
  r.tx = -(r.a * tx + r.b * ty);
  r.ty = -(r.c * tx + r.d * ty);
  return r;
}

Affine Affine::compose(const Affine& o) const {
  Affine r;
  r.a = a * o.a + b * o.c;
  r.b = a * o.b + b * o.d;
  r.c = c * o.a + d * o.c;
  r.d = c * o.b + d * o.d;
  r.tx = a * o.tx + b * o.ty + tx;
  r.ty = c * o.tx + d * o.ty + ty;
  return r;
}

bool Affine::is_identity() const {
  return a == 1 && b == 0 && c == 0 && d == 1 && tx == 0 && ty == 0;
}

Affine Affine::rotation_about(double degrees, double cx, double cy) {
  const double t = degrees * std::numbers::pi / 180.0;
  Affine r;
  r.a = std::cos(t);
  r.b = -std::sin(t);
  r.c = std::sin(t);
  r.d = std::cos(t);
  r.tx = cx - (r.a * cx + r.b * cy);
  r.ty = cy - (r.c * cx + r.d * cy);
  return r;
}

// ------------------------------------------------------------ policies

void AugmentationPolicy::validate() const {
  if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0)) {
    throw ConfigError("rotation range must lie in [0, 180] degrees");
  }
  if (!(scale_min > 0.0 && scale_min <= scale_max)) {
    throw ConfigError("scale range must satisfy 0 < min <= max");
  }
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
    throw ConfigError("flip probability must lie in [0, 1]");
  }
  if (crop_padding < 0) throw ConfigError("crop padding must be >= 0");
  if (intensity_ops_min < 0 || intensity_ops_min > intensity_ops_max ||
      intensity_ops_max > 3) {
    throw ConfigError("intensity op count must satisfy 0 <= min <= max <= 3");
  }
}

bool AugmentationPolicy::contains(const AugmentationPolicy& w) const {
  return w.rotation_deg <= rotation_deg && w.scale_min >= scale_min &&
         w.scale_max <= scale_max && w.flip_prob <= flip_prob &&
         w.crop_padding <= crop_padding && w.intensity_ops_max <= intensity_ops_max;
}

AugmentationPolicy AugmentationPolicy::identity() { return {}; }

AugmentationPolicy AugmentationPolicy::weak_classification() {
  AugmentationPolicy p;
  p.flip_prob = 0.5;
  p.crop_padding = 2;
  return p;
}

AugmentationPolicy AugmentationPolicy::strong_classification() {
  AugmentationPolicy p;
  p.kind = Kind::kStrong;
  p.rotation_deg = 10.0;
  p.scale_min = 0.9;
  p.scale_max = 1.1;
  p.flip_prob = 0.5;
  p.crop_padding = 2;
  p.intensity_ops_min = 1;
  p.intensity_ops_max = 2;
  return p;
}

AugmentationPolicy AugmentationPolicy::weak_keypoints() {
  AugmentationPolicy p;
  p.rotation_deg = 5.0;
  p.scale_min = 0.95;
  p.scale_max = 1.05;
  p.flip_prob = 0.5;
  return p;
}

AugmentationPolicy AugmentationPolicy::strong_keypoints() {
  AugmentationPolicy p;
  p.kind = Kind::kStrong;
  p.rotation_deg = 30.0;
  p.scale_min = 0.75;
  p.scale_max = 1.25;
  p.flip_prob = 0.5;
  return p;
}

// --------------------------------------------------------------- warping

Tensor warp_affine(const Tensor& image, const Affine& transform) {
  if (transform.is_identity()) return image;
  const Affine inv = transform.inverse();
  Tensor out(image.shape());
  const int C = image.c(), H = image.h(), W = image.w();
  for (int n = 0; n < image.n(); ++n) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        auto [sx, sy] = inv.apply(x, y);
        sx = std::clamp(sx, 0.0, static_cast<double>(W - 1));
        sy = std::clamp(sy, 0.0, static_cast<double>(H - 1));
        const int x0 = std::min(static_cast<int>(sx), W - 1);
        const int y0 = std::min(static_cast<int>(sy), H - 1);
        const int x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        const double fx = sx - x0, fy = sy - y0;
        for (int c = 0; c < C; ++c) {
          const double v00 = image.at(n, c, y0, x0), v01 = image.at(n, c, y0, x1);
          const double v10 = image.at(n, c, y1, x0), v11 = image.at(n, c, y1, x1);
          out.at(n, c, y, x) = (1 - fy) * ((1 - fx) * v00 + fx * v01) +
                               fy * ((1 - fx) * v10 + fx * v11);
        }
      }
    }
  }
  return out;
}

namespace {

enum class IntensityOp { kBrightness, kContrast, kPosterize };

void apply_intensity(Tensor& img, IntensityOp op, Rng& rng) {
  auto v = img.values();
  switch (op) {
    case IntensityOp::kBrightness: {
      const double shift = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
      for (auto& x : v) x = std::clamp(x + shift, 0.0, 1.0);
      break;
    }
    case IntensityOp::kContrast: {
      const double f = std::uniform_real_distribution<double>(0.6, 1.4)(rng);
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
      for (auto& x : v) x = std::clamp((x - mean) * f + mean, 0.0, 1.0);
      break;
    }
    case IntensityOp::kPosterize: {
      const int bits = std::uniform_int_distribution<int>(2, 4)(rng);
      const double levels = (1 << bits) - 1;
      for (auto& x : v) x = std::round(x * levels) / levels;
      break;
    }
  }
}

}  // namespace

AugmentedSample augment(const Tensor& image, const KeypointSet* keypoints,
                        const AugmentationPolicy& policy,
                        std::span<const std::pair<int, int>> flip_pairs,
                        Rng& rng) {
  policy.validate();
  if (image.n() != 1) throw InputError("augment expects a single (1, C, H, W) image");
  if (keypoints != nullptr && keypoints->images != 1) {
    throw InputError("augment expects keypoints for exactly one image");
  }
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  const double cx = (image.w() - 1) / 2.0, cy = (image.h() - 1) / 2.0;

  AugmentedSample out;
  out.flipped = policy.flip_prob > 0.0 && U01(rng) < policy.flip_prob;
  const double scale = policy.scale_max > policy.scale_min
                           ? policy.scale_min + (policy.scale_max - policy.scale_min) * U01(rng)
                           : policy.scale_min;
  const double angle =
      policy.rotation_deg > 0.0 ? policy.rotation_deg * (2.0 * U01(rng) - 1.0) : 0.0;
  double tx = 0.0, ty = 0.0;
  if (policy.crop_padding > 0) {
    std::uniform_int_distribution<int> shift(-policy.crop_padding, policy.crop_padding);
    tx = shift(rng);
    ty = shift(rng);
  }

  // p' = c + t + R S F (p - c)
  const double t = angle * std::numbers::pi / 180.0;
  const double f = out.flipped ? -1.0 : 1.0;
  Affine T;
  T.a = std::cos(t) * scale * f;
  T.b = -std::sin(t) * scale;
  T.c = std::sin(t) * scale * f;
  T.d = std::cos(t) * scale;
  T.tx = cx + tx - (T.a * cx + T.b * cy);
  T.ty = cy + ty - (T.c * cx + T.d * cy);
  if (!out.flipped && scale == 1.0 && angle == 0.0 && tx == 0.0 && ty == 0.0) T = Affine{};
  out.transform = T;
  out.image = warp_affine(image, T);

  if (policy.intensity_ops_max > 0) {
    const int count = std::uniform_int_distribution<int>(policy.intensity_ops_min,
                                                         policy.intensity_ops_max)(rng);
    std::array<IntensityOp, 3> ops = {IntensityOp::kBrightness, IntensityOp::kContrast,
                                      IntensityOp::kPosterize};
    std::shuffle(ops.begin(), ops.end(), rng);
    for (int i = 0; i < count; ++i) apply_intensity(out.image, ops[i], rng);
  }

  if (keypoints != nullptr) {
    out.keypoints = KeypointSet(1, keypoints->keypoints);
    for (int k = 0; k < keypoints->keypoints; ++k) {
      const auto [x, y] = T.apply(keypoints->x(0, k), keypoints->y(0, k));
      out.keypoints.x(0, k) = x;
      out.keypoints.y(0, k) = y;
    }
    if (out.flipped) {
      for (const auto& [l, r] : flip_pairs) {
        if (l < 0 || r < 0 || l >= keypoints->keypoints || r >= keypoints->keypoints) {
          throw InputError("flip pair index out of range");
        }
        std::swap(out.keypoints.x(0, l), out.keypoints.x(0, r));
        std::swap(out.keypoints.y(0, l), out.keypoints.y(0, r));
      }
    }
  }
  return out;
}

AugmentedSample augment(const Tensor& image, const KeypointSet* keypoints,
                        const AugmentationPolicy& policy,
                        std::span<const std::pair<int, int>> flip_pairs,
                        std::uint64_t seed) {
  Rng rng = make_rng(seed, "augment");
  return augment(image, keypoints, policy, flip_pairs, rng);
}

}  // namespace dsa
