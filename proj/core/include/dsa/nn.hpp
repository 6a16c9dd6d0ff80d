#pragma once

// Minimal layer library with explicit forward/backward passes. Everything is
// double precision so that finite-difference checks are meaningful.

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dsa/rng.hpp"
#include "dsa/tensor.hpp"

namespace dsa::nn {

struct Parameter {
  std::string name;
  std::vector<double> value;
  std::vector<double> grad;
  std::vector<double> velocity;
  bool decay = true;  // subject to weight decay

  Parameter() = default;
  Parameter(std::string n, std::size_t size, bool decay_ = true)
      : name(std::move(n)),
        value(size, 0.0),
        grad(size, 0.0),
        velocity(size, 0.0),
        decay(decay_) {}
  std::size_t size() const { return value.size(); }
};

class Layer {
 public:
  virtual ~Layer() = default;
  /// When `train` is false no activations are cached and backward() must not
  /// be called for that pass.
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
};

class Conv2d : public Layer {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel,
         int stride = 1, int padding = 0, bool bias = true);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  bool has_bias() const { return has_bias_; }

  /// He-normal weights scaled by fan-in; bias zero.
  void init_fan_in(Rng& rng, double gain = 2.0);
  void init_zero();

 private:
  int in_, out_, k_, stride_, pad_;
  bool has_bias_;
  Parameter weight_;  // [out][in * k * k]
  Parameter bias_;    // [out]
  Shape in_shape_{};
  int out_h_ = 0, out_w_ = 0;
  std::vector<double> col_;  // cached im2col, [in*k*k][N*P]
};

enum class ActivationKind { kIdentity, kReLU, kPReLU, kLeakyReLU, kGELU, kELU };

std::string_view activation_id(ActivationKind kind);
ActivationKind parse_activation(std::string_view id);
double activation_value(ActivationKind kind, double x, double prelu_slope);

class Activation : public Layer {
 public:
  Activation(std::string name, ActivationKind kind);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override;

  ActivationKind kind() const { return kind_; }

  static constexpr double kLeakySlope = 0.1;
  static constexpr double kPReLUInit = 0.25;

 private:
  ActivationKind kind_;
  Parameter slope_;  // used by PReLU only (single shared slope)
  Tensor input_;
};

class MaxPool2d : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Shape in_shape_{};
  std::vector<std::size_t> argmax_;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Shape in_shape_{};
};

/// Fully connected layer over the flattened (C*H*W) sample; output (N, out, 1, 1).
class Linear : public Layer {
 public:
  Linear(std::string name, int in_features, int out_features);

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override;

  void init_fan_in(Rng& rng, double gain = 1.0);

 private:
  int in_, out_;
  Parameter weight_;
  Parameter bias_;
  Tensor input_;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  template <typename L, typename... Args>
  L& emplace(Args&&... args) {
    auto p = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *p;
    layers_.push_back(std::move(p));
    return ref;
  }

  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override;
  std::size_t size() const { return layers_.size(); }
  Layer& at(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Row-wise softmax over channels of an (N, K, 1, 1) tensor.
Tensor softmax(const Tensor& logits);

struct SgdOptions {
  double learning_rate = 0.03;
  double momentum = 0.9;
  bool nesterov = false;
  double weight_decay = 5e-4;
};

/// SGD with (optionally Nesterov) momentum, PyTorch update convention.
class Sgd {
 public:
  Sgd(std::vector<Parameter*> params, SgdOptions opts);
  void zero_grad();
  void step();
  const SgdOptions& options() const { return opts_; }

 private:
  std::vector<Parameter*> params_;
  SgdOptions opts_;
};

}  // namespace dsa::nn
