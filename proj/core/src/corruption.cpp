#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "dsa/data_noise.hpp"

namespace dsa {

namespace {

constexpr std::array<double, 5> kGaussianSigma = {0.04, 0.06, 0.08, 0.09, 0.10};
constexpr std::array<double, 5> kImpulseFraction = {0.01, 0.02, 0.03, 0.05, 0.07};
constexpr std::array<double, 5> kBlurLength = {3, 5, 7, 9, 11};
constexpr std::array<double, 5> kContrastScale = {0.75, 0.5, 0.4, 0.3, 0.2};

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

std::string_view corruption_id(Corruption c) {
  switch (c) {
    case Corruption::kGaussianNoise: return "gaussian_noise";
    case Corruption::kImpulseNoise: return "impulse_noise";
    case Corruption::kMotionBlur: return "motion_blur";
    case Corruption::kContrast: return "contrast";
  }
  return "unknown";
}

Corruption parse_corruption(std::string_view id) {
  for (auto c : {Corruption::kGaussianNoise, Corruption::kImpulseNoise,
                 Corruption::kMotionBlur, Corruption::kContrast}) {
    if (corruption_id(c) == id) return c;
  }
  throw InputError("unknown corruption '" + std::string(id) +
                   "' (expected gaussian_noise, impulse_noise, motion_blur, contrast)");
}

double corruption_parameter(Corruption c, int severity) {
  if (severity < 1 || severity > 5) throw InputError("severity must lie in 1..5");
  const auto i = static_cast<std::size_t>(severity - 1);
  switch (c) {
    case Corruption::kGaussianNoise: return kGaussianSigma[i];
    case Corruption::kImpulseNoise: return kImpulseFraction[i];
    case Corruption::kMotionBlur: return kBlurLength[i];
    case Corruption::kContrast: return kContrastScale[i];
  }
  return 0.0;
}

Tensor corrupt_images(const Tensor& images, Corruption c, int severity,
                      std::uint64_t seed) {
  const double param = corruption_parameter(c, severity);
  Tensor out = images;
  const int C = images.c(), H = images.h(), W = images.w();
  const std::size_t per_image = images.shape().sample_size();
  const std::string component = "corrupt." + std::string(corruption_id(c));

  for (int n = 0; n < images.n(); ++n) {
    auto dst = out.sample(n);
    const auto src = images.sample(n);
    Rng rng = make_rng(seed, component, n);
    switch (c) {
      case Corruption::kGaussianNoise: {
        std::normal_distribution<double> noise(0.0, param);
        for (auto& v : dst) v = clip01(v + noise(rng));
        break;
      }
      case Corruption::kImpulseNoise: {
        // Exactly round(fraction * values) entries become 0 or 1.
        const auto count = static_cast<std::size_t>(
            std::lround(param * static_cast<double>(per_image)));
        std::vector<std::size_t> order(per_image);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        std::bernoulli_distribution salt(0.5);
        for (std::size_t i = 0; i < count; ++i) dst[order[i]] = salt(rng) ? 1.0 : 0.0;
        break;
      }
      case Corruption::kMotionBlur: {
        // Horizontal box kernel, clamp-to-edge.
        const int len = static_cast<int>(param);
        const int half = len / 2;
        for (int ch = 0; ch < C; ++ch) {
          for (int y = 0; y < H; ++y) {
            const double* row = src.data() + (static_cast<std::size_t>(ch) * H + y) * W;
            double* orow = dst.data() + (static_cast<std::size_t>(ch) * H + y) * W;
            for (int x = 0; x < W; ++x) {
              double s = 0.0;
              for (int d = -half; d <= half; ++d) s += row[std::clamp(x + d, 0, W - 1)];
              orow[x] = clip01(s / len);
            }
          }
        }
        break;
      }
      case Corruption::kContrast: {
        const double mean =
            std::accumulate(src.begin(), src.end(), 0.0) / static_cast<double>(per_image);
        for (std::size_t i = 0; i < per_image; ++i) {
          dst[i] = clip01((src[i] - mean) * param + mean);
        }
        break;
      }
    }
  }
  return out;
}

}  // namespace dsa
