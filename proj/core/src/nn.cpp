#include "dsa/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace dsa::nn {

namespace {

using MatR =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

}  // namespace

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel,
               int stride, int padding, bool bias)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      stride_(stride),
      pad_(padding),
      has_bias_(bias),
      weight_(name + ".weight",
              static_cast<std::size_t>(out_channels) * in_channels * kernel *
                  kernel),
      bias_(name + ".bias", bias ? static_cast<std::size_t>(out_channels) : 0,
            false) {
  if (in_ < 1 || out_ < 1 || k_ < 1 || stride_ < 1 || pad_ < 0) {
    throw ConfigError("invalid conv geometry for " + name);
  }
}

void Conv2d::init_fan_in(Rng& rng, double gain) {
  const double fan_in = static_cast<double>(in_) * k_ * k_;
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / fan_in));
  for (double& v : weight_.value) v = dist(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

void Conv2d::init_zero() {
  std::fill(weight_.value.begin(), weight_.value.end(), 0.0);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

std::vector<Parameter*> Conv2d::parameters() {
  if (has_bias_) return {&weight_, &bias_};
  return {&weight_};
}

Tensor Conv2d::forward(const Tensor& x, bool train) {
  if (x.c() != in_) {
    throw ConfigError(weight_.name + ": expected " + std::to_string(in_) +
                      " input channels, got " + std::to_string(x.c()));
  }
  const int N = x.n(), H = x.h(), W = x.w();
  const int Ho = (H + 2 * pad_ - k_) / stride_ + 1;
  const int Wo = (W + 2 * pad_ - k_) / stride_ + 1;
  if (Ho < 1 || Wo < 1) throw ConfigError("conv output would be empty");
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t NP = static_cast<std::size_t>(N) * P;
  const int K = in_ * k_ * k_;

  std::vector<double> col(static_cast<std::size_t>(K) * NP, 0.0);
  for (int ci = 0; ci < in_; ++ci) {
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const std::size_t row = (static_cast<std::size_t>(ci) * k_ + ky) * k_ + kx;
        double* dst = col.data() + row * NP;
        for (int n = 0; n < N; ++n) {
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= W) continue;
              dst[n * P + oy * Wo + ox] = x.at(n, ci, iy, ix);
            }
          }
        }
      }
    }
  }

  MatR out = CMapR(weight_.value.data(), out_, K) * CMapR(col.data(), K, NP);
  Tensor y({N, out_, Ho, Wo});
  for (int co = 0; co < out_; ++co) {
    const double b = has_bias_ ? bias_.value[co] : 0.0;
    for (int n = 0; n < N; ++n) {
      double* dst = y.data() + y.index(n, co, 0, 0);
      const double* src = out.data() + co * NP + n * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
    }
  }
  if (train) {
    in_shape_ = x.shape();
    out_h_ = Ho;
    out_w_ = Wo;
    col_ = std::move(col);
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& g) {
  const int N = in_shape_.n, H = in_shape_.h, W = in_shape_.w;
  const int Ho = out_h_, Wo = out_w_;
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t NP = static_cast<std::size_t>(N) * P;
  const int K = in_ * k_ * k_;
  if (g.n() != N || g.c() != out_ || g.h() != Ho || g.w() != Wo) {
    throw ConfigError(weight_.name + ": backward shape mismatch");
  }

  MatR gm(out_, NP);
  for (int co = 0; co < out_; ++co) {
    for (int n = 0; n < N; ++n) {
      const double* src = g.data() + g.index(n, co, 0, 0);
      std::copy(src, src + P, gm.data() + co * NP + n * P);
    }
  }
  CMapR col(col_.data(), K, NP);
  MapR(weight_.grad.data(), out_, K).noalias() += gm * col.transpose();
  if (has_bias_) {
    for (int co = 0; co < out_; ++co) bias_.grad[co] += gm.row(co).sum();
  }
  MatR dcol = CMapR(weight_.value.data(), out_, K).transpose() * gm;

  Tensor dx(in_shape_);
  for (int ci = 0; ci < in_; ++ci) {
    for (int ky = 0; ky < k_; ++ky) {
      for (int kx = 0; kx < k_; ++kx) {
        const std::size_t row = (static_cast<std::size_t>(ci) * k_ + ky) * k_ + kx;
        const double* src = dcol.data() + row * NP;
        for (int n = 0; n < N; ++n) {
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= H) continue;
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= W) continue;
              dx.at(n, ci, iy, ix) += src[n * P + oy * Wo + ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

// ------------------------------------------------------------ Activation

std::string_view activation_id(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kIdentity: return "identity";
    case ActivationKind::kReLU: return "relu";
    case ActivationKind::kPReLU: return "prelu";
    case ActivationKind::kLeakyReLU: return "leaky_relu";
    case ActivationKind::kGELU: return "gelu";
    case ActivationKind::kELU: return "elu";
  }
  return "identity";
}

ActivationKind parse_activation(std::string_view id) {
  for (auto k : {ActivationKind::kIdentity, ActivationKind::kReLU,
                 ActivationKind::kPReLU, ActivationKind::kLeakyReLU,
                 ActivationKind::kGELU, ActivationKind::kELU}) {
    if (activation_id(k) == id) return k;
  }
  throw InputError("unknown activation id '" + std::string(id) + "'");
}

double activation_value(ActivationKind kind, double x, double prelu_slope) {
  switch (kind) {
    case ActivationKind::kIdentity: return x;
    case ActivationKind::kReLU: return x > 0 ? x : 0.0;
    case ActivationKind::kPReLU: return x > 0 ? x : prelu_slope * x;
    case ActivationKind::kLeakyReLU:
      return x > 0 ? x : Activation::kLeakySlope * x;
    case ActivationKind::kGELU: return x * normal_cdf(x);
    case ActivationKind::kELU: return x > 0 ? x : std::expm1(x);
  }
  return x;
}

Activation::Activation(std::string name, ActivationKind kind)
    : kind_(kind),
      slope_(name + ".slope", kind == ActivationKind::kPReLU ? 1 : 0, false) {
  if (kind == ActivationKind::kPReLU) slope_.value[0] = kPReLUInit;
}

std::vector<Parameter*> Activation::parameters() {
  if (kind_ == ActivationKind::kPReLU) return {&slope_};
  return {};
}

Tensor Activation::forward(const Tensor& x, bool train) {
  Tensor y(x.shape());
  const double a = kind_ == ActivationKind::kPReLU ? slope_.value[0] : 0.0;
  auto in = x.values();
  auto out = y.values();
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = activation_value(kind_, in[i], a);
  }
  if (train) input_ = x;
  return y;
}

Tensor Activation::backward(const Tensor& g) {
  if (!(g.shape() == input_.shape())) {
    throw ConfigError("activation backward shape mismatch");
  }
  Tensor dx(g.shape());
  auto in = input_.values();
  auto go = g.values();
  auto out = dx.values();
  switch (kind_) {
    case ActivationKind::kIdentity:
      std::copy(go.begin(), go.end(), out.begin());
      break;
    case ActivationKind::kReLU:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0 ? go[i] : 0.0;
      break;
    case ActivationKind::kPReLU: {
      const double a = slope_.value[0];
      double da = 0.0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] > 0) {
          out[i] = go[i];
        } else {
          out[i] = a * go[i];
          da += in[i] * go[i];
        }
      }
      slope_.grad[0] += da;
      break;
    }
    case ActivationKind::kLeakyReLU:
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = in[i] > 0 ? go[i] : kLeakySlope * go[i];
      }
      break;
    case ActivationKind::kGELU:
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = go[i] * (normal_cdf(in[i]) + in[i] * normal_pdf(in[i]));
      }
      break;
    case ActivationKind::kELU:
      for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = in[i] > 0 ? go[i] : go[i] * std::exp(in[i]);
      }
      break;
  }
  return dx;
}

// ------------------------------------------------------------- pooling

Tensor MaxPool2d::forward(const Tensor& x, bool train) {
  const int Ho = x.h() / 2, Wo = x.w() / 2;
  if (Ho < 1 || Wo < 1) throw ConfigError("max pool input too small");
  Tensor y({x.n(), x.c(), Ho, Wo});
  std::vector<std::size_t> arg(y.size());
  std::size_t o = 0;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t bi = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::size_t idx = x.index(n, c, 2 * oy + dy, 2 * ox + dx);
              if (x.data()[idx] > best) {
                best = x.data()[idx];
                bi = idx;
              }
            }
          }
          y.data()[o] = best;
          arg[o] = bi;
        }
      }
    }
  }
  if (train) {
    in_shape_ = x.shape();
    argmax_ = std::move(arg);
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& g) {
  Tensor dx(in_shape_);
  for (std::size_t o = 0; o < g.size(); ++o) dx.data()[argmax_[o]] += g.data()[o];
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool train) {
  Tensor y({x.n(), x.c(), 1, 1});
  const double inv = 1.0 / static_cast<double>(x.shape().plane());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const double* p = x.data() + x.index(n, c, 0, 0);
      double s = 0.0;
      for (std::size_t i = 0; i < x.shape().plane(); ++i) s += p[i];
      y.at(n, c, 0, 0) = s * inv;
    }
  }
  if (train) in_shape_ = x.shape();
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& g) {
  Tensor dx(in_shape_);
  const std::size_t plane = in_shape_.plane();
  const double inv = 1.0 / static_cast<double>(plane);
  for (int n = 0; n < in_shape_.n; ++n) {
    for (int c = 0; c < in_shape_.c; ++c) {
      double* p = dx.data() + dx.index(n, c, 0, 0);
      std::fill(p, p + plane, g.at(n, c, 0, 0) * inv);
    }
  }
  return dx;
}

// -------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight",
              static_cast<std::size_t>(in_features) * out_features),
      bias_(name + ".bias", static_cast<std::size_t>(out_features), false) {}

void Linear::init_fan_in(Rng& rng, double gain) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / in_));
  for (double& v : weight_.value) v = dist(rng);
  std::fill(bias_.value.begin(), bias_.value.end(), 0.0);
}

std::vector<Parameter*> Linear::parameters() { return {&weight_, &bias_}; }

Tensor Linear::forward(const Tensor& x, bool train) {
  if (static_cast<int>(x.shape().sample_size()) != in_) {
    throw ConfigError(weight_.name + ": input feature mismatch");
  }
  const int N = x.n();
  MatR y = CMapR(x.data(), N, in_) *
           CMapR(weight_.value.data(), out_, in_).transpose();
  Tensor out({N, out_, 1, 1});
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < out_; ++o) out.at(n, o, 0, 0) = y(n, o) + bias_.value[o];
  }
  if (train) input_ = x;
  return out;
}

Tensor Linear::backward(const Tensor& g) {
  const int N = input_.n();
  CMapR gm(g.data(), N, out_);
  CMapR xm(input_.data(), N, in_);
  MapR(weight_.grad.data(), out_, in_).noalias() += gm.transpose() * xm;
  for (int o = 0; o < out_; ++o) bias_.grad[o] += gm.col(o).sum();
  Tensor dx(input_.shape());
  MapR(dx.data(), N, in_).noalias() =
      gm * CMapR(weight_.value.data(), out_, in_);
  return dx;
}

// ---------------------------------------------------------- Sequential

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, train);
  return h;
}

Tensor Sequential::backward(const Tensor& g) {
  Tensor d = g;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    d = (*it)->backward(d);
  }
  return d;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    auto p = l->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Tensor softmax(const Tensor& logits) {
  Tensor p(logits.shape());
  const int K = static_cast<int>(logits.shape().sample_size());
  for (int n = 0; n < logits.n(); ++n) {
    auto z = logits.sample(n);
    auto out = p.sample(n);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (int k = 0; k < K; ++k) {
      out[k] = std::exp(z[k] - mx);
      s += out[k];
    }
    for (int k = 0; k < K; ++k) out[k] /= s;
  }
  return p;
}

// ----------------------------------------------------------------- Sgd

Sgd::Sgd(std::vector<Parameter*> params, SgdOptions opts)
    : params_(std::move(params)), opts_(opts) {}

void Sgd::zero_grad() {
  for (auto* p : params_) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

void Sgd::step() {
  for (auto* p : params_) {
    const double wd = p->decay ? opts_.weight_decay : 0.0;
    for (std::size_t i = 0; i < p->size(); ++i) {
      const double g = p->grad[i] + wd * p->value[i];
      double& v = p->velocity[i];
      v = opts_.momentum * v + g;
      const double update = opts_.nesterov ? g + opts_.momentum * v : v;
      p->value[i] -= opts_.learning_rate * update;
    }
  }
}

}  // namespace dsa::nn
