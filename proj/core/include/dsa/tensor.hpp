#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsa {

/// Raised when a configuration or shape contract is violated.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed user inputs (labels out of range, unknown ids, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(c) * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class FeatureMap;

/// Dense batch of feature maps laid out as (N, C, H, W), row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }

  double& at(int n, int c, int h, int w) {
    return data_[index(n, c, h, w)];
  }
  double at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }
  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }

  std::span<double> sample(int i);
  std::span<const double> sample(int i) const;
  FeatureMap feature_map(int i) const;

  /// Channels [begin, begin + count) of every sample.
  Tensor slice_channels(int begin, int count) const;
  /// Samples [begin, begin + count).
  Tensor slice_batch(int begin, int count) const;
  /// Samples picked by index, in order.
  Tensor gather(std::span<const int> indices) const;

  static Tensor concat_channels(std::span<const Tensor> parts);
  static Tensor concat_batch(std::span<const Tensor> parts);
  static Tensor stack(std::span<const FeatureMap> maps);

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);
  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }

  void fill(double v);
  bool all_finite() const;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

/// A single (C, H, W) real feature map.
class FeatureMap {
 public:
  FeatureMap(int channels, int height, int width, double fill = 0.0);
  FeatureMap(int channels, int height, int width, std::vector<double> values);

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }

  bool all_finite() const;
  bool same_shape(const FeatureMap& o) const {
    return c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  FeatureMap channels_slice(int begin, int count) const;
  static FeatureMap concat(const FeatureMap& a, const FeatureMap& b);
  Tensor as_tensor() const;

  FeatureMap& operator+=(const FeatureMap& o);
  friend FeatureMap operator+(FeatureMap a, const FeatureMap& b) {
    return a += b;
  }
  bool operator==(const FeatureMap&) const = default;

 private:
  int c_;
  int h_;
  int w_;
  std::vector<double> data_;
};

}  // namespace dsa
