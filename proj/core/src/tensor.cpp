#include "dsa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dsa {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << h << "," << w << ")";
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(shape), data_(shape.size(), fill) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ConfigError("negative tensor extent " + shape.str());
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.size()) {
    throw ConfigError("tensor value count does not match shape " +
                      shape.str());
  }
}

std::span<double> Tensor::sample(int i) {
  return {data_.data() + static_cast<std::size_t>(i) * shape_.sample_size(),
          shape_.sample_size()};
}

std::span<const double> Tensor::sample(int i) const {
  return {data_.data() + static_cast<std::size_t>(i) * shape_.sample_size(),
          shape_.sample_size()};
}

FeatureMap Tensor::feature_map(int i) const {
  auto s = sample(i);
  return FeatureMap(shape_.c, shape_.h, shape_.w,
                    std::vector<double>(s.begin(), s.end()));
}

Tensor Tensor::slice_channels(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > shape_.c) {
    throw ConfigError("channel slice out of range");
  }
  Tensor out({shape_.n, count, shape_.h, shape_.w});
  const std::size_t plane = shape_.plane();
  for (int n = 0; n < shape_.n; ++n) {
    const double* src = data_.data() + index(n, begin, 0, 0);
    std::copy(src, src + plane * count, out.data() + out.index(n, 0, 0, 0));
  }
  return out;
}

Tensor Tensor::slice_batch(int begin, int count) const {
  if (begin < 0 || count < 0 || begin + count > shape_.n) {
    throw ConfigError("batch slice out of range");
  }
  const std::size_t ss = shape_.sample_size();
  std::vector<double> v(data_.begin() + begin * ss,
                        data_.begin() + (begin + count) * ss);
  return Tensor({count, shape_.c, shape_.h, shape_.w}, std::move(v));
}

Tensor Tensor::gather(std::span<const int> indices) const {
  Tensor out({static_cast<int>(indices.size()), shape_.c, shape_.h, shape_.w});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto src = sample(indices[i]);
    std::copy(src.begin(), src.end(), out.sample(static_cast<int>(i)).begin());
  }
  return out;
}

Tensor Tensor::concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) throw ConfigError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  int channels = 0;
  for (const auto& p : parts) {
    if (p.n() != s0.n || p.h() != s0.h || p.w() != s0.w) {
      throw ConfigError("channel concat shape mismatch " + p.shape().str() +
                        " vs " + s0.str());
    }
    channels += p.c();
  }
  Tensor out({s0.n, channels, s0.h, s0.w});
  for (int n = 0; n < s0.n; ++n) {
    double* dst = out.data() + out.index(n, 0, 0, 0);
    for (const auto& p : parts) {
      auto src = p.sample(n);
      dst = std::copy(src.begin(), src.end(), dst);
    }
  }
  return out;
}

Tensor Tensor::concat_batch(std::span<const Tensor> parts) {
  if (parts.empty()) throw ConfigError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    if (p.c() != s0.c || p.h() != s0.h || p.w() != s0.w) {
      throw ConfigError("batch concat shape mismatch");
    }
    total += p.n();
  }
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(total) * s0.sample_size());
  for (const auto& p : parts) v.insert(v.end(), p.data_.begin(), p.data_.end());
  return Tensor({total, s0.c, s0.h, s0.w}, std::move(v));
}

Tensor Tensor::stack(std::span<const FeatureMap> maps) {
  if (maps.empty()) throw ConfigError("stack of zero feature maps");
  const auto& m0 = maps[0];
  Tensor out({static_cast<int>(maps.size()), m0.channels(), m0.height(),
              m0.width()});
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!maps[i].same_shape(m0)) throw ConfigError("stack shape mismatch");
    auto v = maps[i].values();
    std::copy(v.begin(), v.end(), out.sample(static_cast<int>(i)).begin());
  }
  return out;
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!(other.shape_ == shape_)) {
    throw ConfigError("tensor add shape mismatch " + shape_.str() + " vs " +
                      other.shape_.str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

FeatureMap::FeatureMap(int channels, int height, int width, double fill)
    : c_(channels), h_(height), w_(width) {
  if (c_ < 1 || h_ < 1 || w_ < 1) {
    throw ConfigError("feature map extents must be >= 1");
  }
  data_.assign(static_cast<std::size_t>(c_) * h_ * w_, fill);
}

FeatureMap::FeatureMap(int channels, int height, int width,
                       std::vector<double> values)
    : c_(channels), h_(height), w_(width), data_(std::move(values)) {
  if (c_ < 1 || h_ < 1 || w_ < 1) {
    throw ConfigError("feature map extents must be >= 1");
  }
  if (data_.size() != static_cast<std::size_t>(c_) * h_ * w_) {
    throw ConfigError("feature map value count mismatch");
  }
}

bool FeatureMap::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

FeatureMap FeatureMap::channels_slice(int begin, int count) const {
  if (begin < 0 || count < 1 || begin + count > c_) {
    throw ConfigError("feature map channel slice out of range");
  }
  const std::size_t plane = static_cast<std::size_t>(h_) * w_;
  std::vector<double> v(data_.begin() + begin * plane,
                        data_.begin() + (begin + count) * plane);
  return FeatureMap(count, h_, w_, std::move(v));
}

FeatureMap FeatureMap::concat(const FeatureMap& a, const FeatureMap& b) {
  if (a.h_ != b.h_ || a.w_ != b.w_) {
    throw ConfigError("feature map concat spatial mismatch");
  }
  std::vector<double> v(a.data_);
  v.insert(v.end(), b.data_.begin(), b.data_.end());
  return FeatureMap(a.c_ + b.c_, a.h_, a.w_, std::move(v));
}

Tensor FeatureMap::as_tensor() const {
  return Tensor({1, c_, h_, w_}, data_);
}

FeatureMap& FeatureMap::operator+=(const FeatureMap& o) {
  if (!same_shape(o)) throw ConfigError("feature map add shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

}  // namespace dsa
