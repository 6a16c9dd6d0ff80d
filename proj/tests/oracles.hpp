#pragma once

// Reference implementations used by the tests. Deliberately naive: single
// pass textbook formulas, long double accumulation, nested loops.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "dsa/metrics.hpp"
#include "dsa/rng.hpp"
#include "dsa/tensor.hpp"

namespace dsa::testing {

// Pearson via raw moment sums: (n Sxy - Sx Sy) / sqrt((n Sxx - Sx^2)(n Syy - Sy^2)).
inline double oracle_pearson(std::span<const double> a, std::span<const double> b) {
  long double n = static_cast<long double>(a.size());
  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const long double x = a[i], y = b[i];
    sx += x;
    sy += y;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
  }
  const long double vx = n * sxx - sx * sx;
  const long double vy = n * syy - sy * sy;
  if (vx <= 0 || vy <= 0) return 0.0;
  return static_cast<double>((n * sxy - sx * sy) / std::sqrt(vx * vy));
}

// batch[s][m] flattened private map of head m for sample s.
inline double oracle_lb_loss(const std::vector<std::vector<std::vector<double>>>& batch) {
  long double total = 0;
  for (const auto& heads : batch) {
    const std::size_t M = heads.size();
    long double s = 0;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < M; ++j) {
        if (i == j) continue;
        s += oracle_pearson(heads[i], heads[j]);
      }
    }
    total += s / M;
  }
  return static_cast<double>(total / batch.size());
}

inline double oracle_keypoint_mse(const KeypointSet& p, const KeypointSet& g) {
  long double s = 0;
  for (int i = 0; i < p.images; ++i) {
    for (int k = 0; k < p.keypoints; ++k) {
      const long double dx = p.x(i, k) - g.x(i, k);
      const long double dy = p.y(i, k) - g.y(i, k);
      s += std::sqrt(dx * dx + dy * dy);
    }
  }
  return static_cast<double>(s / p.images / p.keypoints);
}

inline double oracle_pck(const KeypointSet& p, const KeypointSet& g, double T, int a, int b) {
  long long hit = 0, total = 0;
  for (int i = 0; i < p.images; ++i) {
    const double l = std::hypot(g.x(i, a) - g.x(i, b), g.y(i, a) - g.y(i, b));
    if (l == 0.0) continue;
    for (int k = 0; k < p.keypoints; ++k) {
      const double d = std::hypot(p.x(i, k) - g.x(i, k), p.y(i, k) - g.y(i, k));
      if (d / l <= T) ++hit;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(s);
  for (double& v : t.values()) v = normal(rng);
  return t;
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline KeypointSet random_keypoints(int images, int keypoints, Rng& rng, double extent) {
  KeypointSet k(images, keypoints);
  for (double& v : k.xy) v = uniform_real(rng, 0.0, extent);
  return k;
}

// Central difference of f at x[i], restoring x[i].
inline double central_difference(std::vector<double>& x, std::size_t i,
                                 const std::function<double()>& f, double h) {
  const double saved = x[i];
  x[i] = saved + h;
  const double plus = f();
  x[i] = saved - h;
  const double minus = f();
  x[i] = saved;
  return (plus - minus) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace dsa::testing
