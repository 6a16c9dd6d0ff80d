#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "dsa/data_noise.hpp"

namespace dsa {

namespace {

constexpr int kShapeCount = 10;

double quantize(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

// Shape masks in normalized coordinates (u right, v down), all symmetric
// under a horizontal flip so flip augmentation never changes the class.
bool inside_shape(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double r = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0: return r <= 0.9;                                        // disk
    case 1: return std::max(au, av) <= 0.75;                        // square
    case 2: return v <= 0.75 && v >= -0.85 && au <= 0.5 * (v + 0.85);  // tri up
    case 3: return v >= -0.75 && v <= 0.85 && au <= 0.5 * (0.85 - v);  // tri down
    case 4: return (au <= 0.25 && av <= 0.9) || (av <= 0.25 && au <= 0.9);  // plus
    case 5:
      return std::max(au, av) <= 0.85 &&
             (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35);  // x
    case 6: return r <= 0.95 && r >= 0.55;                          // ring
    case 7: return std::max(au, av) <= 0.85 && std::max(au, av) >= 0.5;  // frame
    case 8: return av <= 0.3 && au <= 0.95;                         // h-bar
    case 9: return au <= 0.3 && av <= 0.95;                         // v-bar
    default: return false;
  }
}

}  // namespace

void SynthClassificationConfig::validate() const {
  if (classes < 2 || classes > 2 * kShapeCount) {
    throw ConfigError("synthetic classification supports 2..20 classes");
  }
  if (image_size < 8) throw ConfigError("image_size must be >= 8");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (labeled < 1 || unlabeled < 0 || test < 1) {
    throw ConfigError("split sizes must be positive");
  }
  if (!(separability >= 0.0 && separability <= 1.0)) {
    throw ConfigError("separability must lie in [0, 1]");
  }
}

namespace {

void render_class_image(const SynthClassificationConfig& cfg, int label,
                        Rng& rng, std::span<double> out) {
  const int S = cfg.image_size, C = cfg.channels;
  const double nuisance = 1.0 - cfg.separability;
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  std::normal_distribution<double> N01(0.0, 1.0);

  const int shape = label % kShapeCount;
  const bool inverted = label >= kShapeCount;

  const double cx = (S - 1) / 2.0 + U(rng) * 0.12 * S * nuisance;
  const double cy = (S - 1) / 2.0 + U(rng) * 0.12 * S * nuisance;
  const double radius = 0.36 * S * (1.0 + 0.15 * nuisance * U(rng));

  std::array<double, 3> fg{}, bg{};
  const double bg_level = 0.25 + 0.1 * nuisance * U(rng);
  for (int c = 0; c < 3; ++c) {
    fg[c] = (1.0 - nuisance) * 0.95 + nuisance * (0.45 + 0.55 * U01(rng));
    bg[c] = bg_level + 0.08 * nuisance * U(rng);
  }
  if (inverted) std::swap(fg, bg);

  // Background texture: one random grating.
  const double tex_amp = 0.12 * nuisance;
  const double freq = 0.4 + 0.8 * U01(rng);
  const double theta = std::numbers::pi * U01(rng);
  const double phase = 2.0 * std::numbers::pi * U01(rng);
  const double noise = 0.04 * nuisance;

  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      // 2x2 supersampling for smoother edges.
      double cover = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (x + 0.25 + 0.5 * sx - 0.5 - cx) / radius;
          const double v = (y + 0.25 + 0.5 * sy - 0.5 - cy) / radius;
          cover += inside_shape(shape, u, v) ? 0.25 : 0.0;
        }
      }
      const double tex =
          tex_amp * std::sin(freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
      for (int c = 0; c < C; ++c) {
        const double f = C == 1 ? (fg[0] + fg[1] + fg[2]) / 3.0 : fg[c];
        const double b = C == 1 ? (bg[0] + bg[1] + bg[2]) / 3.0 : bg[c];
        double v = cover * f + (1.0 - cover) * (b + tex);
        if (noise > 0.0) v += noise * N01(rng);
        out[(static_cast<std::size_t>(c) * S + y) * S + x] = quantize(v);
      }
    }
  }
}

Split make_class_split(const SynthClassificationConfig& cfg, std::uint64_t seed,
                       std::string_view name, int count, bool balanced) {
  Split s;
  s.images = Tensor({count, cfg.channels, cfg.image_size, cfg.image_size});
  s.labels.resize(count);
  Rng label_rng = make_rng(seed, std::string("synth.labels.") + std::string(name));
  std::uniform_int_distribution<int> pick(0, cfg.classes - 1);
  for (int i = 0; i < count; ++i) {
    s.labels[i] = balanced ? i % cfg.classes : pick(label_rng);
  }
  if (balanced) std::shuffle(s.labels.begin(), s.labels.end(), label_rng);
  const std::string component = "synth.image." + std::string(name);
  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, component, i);
    render_class_image(cfg, s.labels[i], rng, s.images.sample(i));
  }
  return s;
}

}  // namespace

Dataset synth_classification(const SynthClassificationConfig& cfg,
                             std::uint64_t seed) {
  cfg.validate();
  Dataset d;
  d.manifest.task = TaskKind::kClassification;
  d.manifest.classes = cfg.classes;
  d.manifest.image_size = cfg.image_size;
  d.manifest.channels = cfg.channels;
  d.manifest.labeled = cfg.labeled;
  d.manifest.unlabeled = cfg.unlabeled;
  d.manifest.test = cfg.test;
  d.labeled = make_class_split(cfg, seed, "labeled", cfg.labeled, true);
  d.unlabeled = make_class_split(cfg, seed, "unlabeled", cfg.unlabeled, false);
  d.test = make_class_split(cfg, seed, "test", cfg.test, false);
  return d;
}

// ------------------------------------------------------------ keypoints

void SynthKeypointConfig::validate() const {
  if (keypoints < 2) throw ConfigError("keypoint task needs K >= 2");
  if (image_size < 16) throw ConfigError("keypoint images must be >= 16 px");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (labeled < 1 || unlabeled < 0 || test < 1) {
    throw ConfigError("split sizes must be positive");
  }
}

namespace {

// Template layout in normalized face coordinates: eyes, nose, mouth
// corners, then extra points on a circle.
std::vector<std::array<double, 2>> landmark_template(int K) {
  std::vector<std::array<double, 2>> t = {
      {-0.5, -0.35}, {0.5, -0.35}, {0.0, 0.1}, {-0.35, 0.55}, {0.35, 0.55}};
  for (int k = 5; k < K; ++k) {
    const double a = 2.0 * std::numbers::pi * (k - 5) / std::max(1, K - 5);
    t.push_back({0.85 * std::cos(a), 0.85 * std::sin(a)});
  }
  t.resize(K);
  return t;
}

// Landmarks in a flip pair share a colour; identity comes from layout.
std::array<double, 3> landmark_colour(int k) {
  static constexpr std::array<std::array<double, 3>, 6> kColours = {{
      {0.95, 0.25, 0.2}, {0.95, 0.25, 0.2}, {0.2, 0.9, 0.3},
      {0.25, 0.4, 0.95}, {0.25, 0.4, 0.95}, {0.95, 0.9, 0.2}}};
  return kColours[std::min<std::size_t>(k, kColours.size() - 1)];
}

Split make_keypoint_split(const SynthKeypointConfig& cfg, std::uint64_t seed,
                          std::string_view name, int count) {
  const int S = cfg.image_size, K = cfg.keypoints, C = cfg.channels;
  const auto tmpl = landmark_template(K);
  Split s;
  s.images = Tensor({count, C, S, S});
  s.labels.assign(count, -1);
  s.keypoints = KeypointSet(count, K);
  const std::string component = "synth.keypoints." + std::string(name);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  std::normal_distribution<double> N01(0.0, 1.0);

  for (int i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, component, i);
    const double scale = S * (0.26 + 0.06 * U01(rng));
    const double angle = 20.0 * U(rng) * std::numbers::pi / 180.0;
    const double cx = (S - 1) / 2.0 + 0.08 * S * U(rng);
    const double cy = (S - 1) / 2.0 + 0.08 * S * U(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int k = 0; k < K; ++k) {
      const double u = tmpl[k][0] * scale, v = tmpl[k][1] * scale;
      s.keypoints.x(i, k) = cx + ca * u - sa * v;
      s.keypoints.y(i, k) = cy + sa * u + ca * v;
    }
    const double bg = 0.2 + 0.1 * U01(rng);
    const double face = 0.45 + 0.1 * U01(rng);
    const double blob = 0.9 + 0.3 * U01(rng);
    auto img = s.images.sample(i);
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        const double du = x - cx, dv = y - cy;
        const double fu = (ca * du + sa * dv) / (1.05 * scale);
        const double fv = (-sa * du + ca * dv) / (1.2 * scale);
        const bool in_face = fu * fu + fv * fv <= 1.0;
        std::array<double, 3> px{};
        for (int c = 0; c < 3; ++c) px[c] = in_face ? face : bg;
        for (int k = 0; k < K; ++k) {
          const double dx = x - s.keypoints.x(i, k), dy = y - s.keypoints.y(i, k);
          const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * blob * blob));
          const auto col = landmark_colour(k);
          for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0 - w) + col[c] * w;
        }
        for (int c = 0; c < C; ++c) {
          const double v = C == 1 ? (px[0] + px[1] + px[2]) / 3.0 : px[c];
          img[(static_cast<std::size_t>(c) * S + y) * S + x] =
              quantize(v + 0.02 * N01(rng));
        }
      }
    }
  }
  return s;
}

}  // namespace

Dataset synth_keypoints(const SynthKeypointConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset d;
  d.manifest.task = TaskKind::kKeypoints;
  d.manifest.keypoints = cfg.keypoints;
  d.manifest.image_size = cfg.image_size;
  d.manifest.channels = cfg.channels;
  d.manifest.labeled = cfg.labeled;
  d.manifest.unlabeled = cfg.unlabeled;
  d.manifest.test = cfg.test;
  d.manifest.normalization_pair = {0, 1};
  d.manifest.flip_pairs = {{0, 1}};
  if (cfg.keypoints >= 5) d.manifest.flip_pairs.push_back({3, 4});
  d.labeled = make_keypoint_split(cfg, seed, "labeled", cfg.labeled);
  d.unlabeled = make_keypoint_split(cfg, seed, "unlabeled", cfg.unlabeled);
  d.test = make_keypoint_split(cfg, seed, "test", cfg.test);
  return d;
}

Tensor render_heatmaps(const KeypointSet& keypoints, int heat_size, int stride,
                       double sigma) {
  if (heat_size < 1 || stride < 1 || !(sigma > 0.0)) {
    throw ConfigError("render_heatmaps: invalid geometry");
  }
  Tensor out({keypoints.images, keypoints.keypoints, heat_size, heat_size});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int i = 0; i < keypoints.images; ++i) {
    for (int k = 0; k < keypoints.keypoints; ++k) {
      const double hx = image_to_heatmap(keypoints.x(i, k), stride);
      const double hy = image_to_heatmap(keypoints.y(i, k), stride);
      for (int y = 0; y < heat_size; ++y) {
        for (int x = 0; x < heat_size; ++x) {
          const double d2 = (x - hx) * (x - hx) + (y - hy) * (y - hy);
          out.at(i, k, y, x) = std::exp(-d2 * inv);
        }
      }
    }
  }
  return out;
}

// ----------------------------------------------------------- label noise

NoisyLabels inject_label_noise(std::span<const int> labels, int classes,
                               double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InputError("noise rate must lie in [0, 1)");
  const int N = static_cast<int>(labels.size());
  const int flips = static_cast<int>(std::floor(rate * N));
  if (flips > 0 && classes < 2) {
    throw InputError("label noise needs at least two classes");
  }
  for (int l : labels) {
    if (l < 0 || l >= classes) throw InputError("label out of range for noise injection");
  }
  NoisyLabels out;
  out.labels.assign(labels.begin(), labels.end());
  out.flipped.assign(N, 0);
  out.flips = flips;
  Rng rng = make_rng(seed, "label_noise");
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> other(0, std::max(0, classes - 2));
  for (int f = 0; f < flips; ++f) {
    const int i = order[f];
    int c = other(rng);
    if (c >= labels[i]) ++c;  // skip the original class
    out.labels[i] = c;
    out.flipped[i] = 1;
  }
  return out;
}

}  // namespace dsa
