#include "dsa/ensemble_heads.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace dsa {

namespace {

constexpr std::array<Variant, 6> kVariants = {
    Variant::kSingle, Variant::kMhe, Variant::kCbe,
    Variant::kSdoas,  Variant::kDsa, Variant::kDsaNoAdapters};

constexpr std::array<nn::ActivationKind, 5> kAdapterRoster = {
    nn::ActivationKind::kPReLU, nn::ActivationKind::kReLU,
    nn::ActivationKind::kLeakyReLU, nn::ActivationKind::kGELU,
    nn::ActivationKind::kELU};

}  // namespace

std::string_view variant_id(Variant v) {
  switch (v) {
    case Variant::kSingle: return "single";
    case Variant::kMhe: return "mhe";
    case Variant::kCbe: return "cbe";
    case Variant::kSdoas: return "sdoas";
    case Variant::kDsa: return "dsa";
    case Variant::kDsaNoAdapters: return "dsa-noadapter";
  }
  return "dsa";
}

Variant parse_variant(std::string_view id) {
  std::string lower(id);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  for (Variant v : kVariants) {
    if (variant_id(v) == lower) return v;
  }
  throw ConfigError("unknown variant '" + std::string(id) +
                    "' (expected single, mhe, cbe, sdoas, dsa, dsa-noadapter)");
}

std::string_view task_id(TaskKind t) {
  return t == TaskKind::kClassification ? "classification" : "keypoints";
}

TaskKind parse_task(std::string_view id) {
  if (id == "classification") return TaskKind::kClassification;
  if (id == "keypoints") return TaskKind::kKeypoints;
  throw ConfigError("unknown task '" + std::string(id) + "'");
}

// ------------------------------------------------------ EnsembleConfig

bool EnsembleConfig::has_expansion() const {
  return variant == Variant::kCbe || variant == Variant::kDsa ||
         variant == Variant::kDsaNoAdapters;
}

bool EnsembleConfig::has_adapters() const {
  return variant == Variant::kSdoas || variant == Variant::kDsa;
}

int EnsembleConfig::shared_channels() const {
  return has_expansion() ? feature_channels - private_channels
                         : feature_channels;
}

int EnsembleConfig::expanded_channels() const {
  return has_expansion() ? shared_channels() + heads * private_channels
                         : feature_channels;
}

int EnsembleConfig::head_input_channels() const { return feature_channels; }

void EnsembleConfig::validate() const {
  const std::string v(variant_id(variant));
  if (variant == Variant::kSingle) {
    if (heads != 1) throw ConfigError("variant single requires heads = 1");
  } else if (heads < 2) {
    throw ConfigError("variant " + v + " requires heads >= 2");
  }
  if (feature_channels < 1) throw ConfigError("feature_channels must be >= 1");
  if (has_expansion()) {
    if (private_channels < 1 || private_channels >= feature_channels) {
      throw ConfigError("variant " + v +
                        " requires 1 <= private_channels < feature_channels");
    }
  } else if (private_channels != 0) {
    throw ConfigError("private_channels is only valid for cbe/dsa variants");
  }
  if (has_adapters()) {
    if (static_cast<int>(adapters.size()) != heads) {
      throw ConfigError("variant " + v + " requires one adapter per head");
    }
    int prev_expansion = 0;
    for (int m = 0; m < heads; ++m) {
      const AdapterSpec& a = adapters[m];
      if (a.index != m + 1) throw ConfigError("adapter indices must be 1..M");
      if (a.hidden_channels <= shared_channels()) {
        throw ConfigError("adapter hidden width must exceed C_H");
      }
      const int expansion = a.hidden_channels - shared_channels();
      if (expansion <= prev_expansion) {
        throw ConfigError("adapter expansions must be strictly increasing");
      }
      prev_expansion = expansion;
      for (int j = 0; j < m; ++j) {
        if (adapters[j].hidden_channels == a.hidden_channels &&
            adapters[j].activation == a.activation) {
          throw ConfigError("adapter specs must be pairwise distinct");
        }
      }
    }
  } else if (!adapters.empty()) {
    throw ConfigError("adapters are only valid for sdoas/dsa variants, not " +
                      v);
  }
}

int default_private_channels(int feature_channels) {
  return std::max(1, feature_channels / 8);
}

std::vector<AdapterSpec> default_adapter_specs(int heads, int shared_channels) {
  std::vector<AdapterSpec> specs;
  specs.reserve(heads);
  for (int m = 1; m <= heads; ++m) {
    specs.push_back({m, shared_channels + adapter_expansion(m),
                     kAdapterRoster[(m - 1) % kAdapterRoster.size()]});
  }
  return specs;
}

EnsembleConfig make_ensemble_config(Variant variant, int heads,
                                    int feature_channels,
                                    std::optional<int> private_channels) {
  EnsembleConfig cfg;
  cfg.variant = variant;
  cfg.heads = heads;
  cfg.feature_channels = feature_channels;
  cfg.private_channels =
      cfg.has_expansion()
          ? private_channels.value_or(default_private_channels(feature_channels))
          : 0;
  if (cfg.has_adapters()) {
    cfg.adapters = default_adapter_specs(heads, cfg.shared_channels());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------- FeatureExpansion

FeatureExpansion::FeatureExpansion(const EnsembleConfig& cfg, Rng& rng)
    : cfg_(cfg),
      conv_("expand", cfg.feature_channels, cfg.expanded_channels(), 1) {
  if (!cfg.has_expansion()) {
    throw ConfigError("feature expansion requires a cbe/dsa variant");
  }
  conv_.init_fan_in(rng, 1.0);
}

Tensor FeatureExpansion::forward(const Tensor& features, bool train) {
  if (features.c() != cfg_.feature_channels) {
    throw ConfigError("expand_features: expected C_F = " +
                      std::to_string(cfg_.feature_channels) + " channels, got " +
                      std::to_string(features.c()));
  }
  return conv_.forward(features, train);
}

Tensor FeatureExpansion::backward(const Tensor& grad) {
  return conv_.backward(grad);
}

Tensor expand_features(const Tensor& features, const EnsembleConfig& cfg,
                       FeatureExpansion& expansion) {
  if (!cfg.has_expansion()) {
    throw ConfigError("expand_features requires a cbe/dsa variant");
  }
  return expansion.forward(features, false);
}

SharedPrivate split_shared_private(const Tensor& expanded,
                                   const EnsembleConfig& cfg) {
  if (!cfg.has_expansion()) {
    throw ConfigError("split_shared_private requires a cbe/dsa variant");
  }
  if (expanded.c() != cfg.expanded_channels()) {
    throw ConfigError("split_shared_private: expected C_H + M*C_G = " +
                      std::to_string(cfg.expanded_channels()) +
                      " channels, got " + std::to_string(expanded.c()));
  }
  SharedPrivate out;
  const int ch = cfg.shared_channels();
  out.shared = expanded.slice_channels(0, ch);
  out.privates.reserve(cfg.heads);
  for (int m = 0; m < cfg.heads; ++m) {
    out.privates.push_back(
        expanded.slice_channels(ch + m * cfg.private_channels,
                                cfg.private_channels));
  }
  return out;
}

Tensor merge_shared_private(const Tensor& shared,
                            std::span<const Tensor> privates) {
  std::vector<Tensor> parts;
  parts.reserve(privates.size() + 1);
  parts.push_back(shared);
  parts.insert(parts.end(), privates.begin(), privates.end());
  return Tensor::concat_channels(parts);
}

// ------------------------------------------------------------- Adapter

Adapter::Adapter(const AdapterSpec& spec, int shared_channels, Rng& rng,
                 bool zero_init_output)
    : spec_(spec),
      channels_(shared_channels),
      expand_("adapter" + std::to_string(spec.index) + ".expand",
              shared_channels, spec.hidden_channels, 1),
      act1_("adapter" + std::to_string(spec.index) + ".act1", spec.activation),
      restore_("adapter" + std::to_string(spec.index) + ".restore",
               spec.hidden_channels, shared_channels, 1),
      act2_("adapter" + std::to_string(spec.index) + ".act2", spec.activation) {
  if (spec.hidden_channels <= shared_channels) {
    throw ConfigError("adapter hidden width must exceed C_H");
  }
  expand_.init_fan_in(rng);
  if (zero_init_output) {
    restore_.init_zero();
  } else {
    restore_.init_fan_in(rng);
  }
}

Tensor Adapter::forward(const Tensor& shared, bool train) {
  if (shared.c() != channels_) {
    throw ConfigError("adapter: expected C_H = " + std::to_string(channels_) +
                      " channels, got " + std::to_string(shared.c()));
  }
  Tensor h = expand_.forward(shared, train);
  h = act1_.forward(h, train);
  h = restore_.forward(h, train);
  return act2_.forward(h, train);
}

Tensor Adapter::backward(const Tensor& grad) {
  Tensor g = act2_.backward(grad);
  g = restore_.backward(g);
  g = act1_.backward(g);
  return expand_.backward(g);
}

std::vector<nn::Parameter*> Adapter::parameters() {
  std::vector<nn::Parameter*> out;
  for (nn::Layer* l : std::initializer_list<nn::Layer*>{&expand_, &act1_,
                                                        &restore_, &act2_}) {
    auto p = l->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Tensor adapter_forward(const Tensor& shared, Adapter& adapter) {
  return adapter.forward(shared, false);
}

// ------------------------------------------------------------ assembly

std::vector<Tensor> assemble_head_inputs(Variant variant, int heads,
                                         const Tensor& shared,
                                         std::span<const Tensor> deltas,
                                         std::span<const Tensor> privates) {
  const bool need_deltas = variant == Variant::kSdoas || variant == Variant::kDsa;
  const bool need_privates = variant == Variant::kCbe ||
                             variant == Variant::kDsa ||
                             variant == Variant::kDsaNoAdapters;
  if (need_deltas && static_cast<int>(deltas.size()) != heads) {
    throw ConfigError("variant " + std::string(variant_id(variant)) +
                      " needs one adapter output per head");
  }
  if (need_privates && static_cast<int>(privates.size()) != heads) {
    throw ConfigError("variant " + std::string(variant_id(variant)) +
                      " needs one private map per head");
  }
  std::vector<Tensor> inputs;
  inputs.reserve(heads);
  for (int m = 0; m < heads; ++m) {
    Tensor base = need_deltas ? shared + deltas[m] : shared;
    if (need_privates) {
      const std::array<Tensor, 2> parts{std::move(base), privates[m]};
      inputs.push_back(Tensor::concat_channels(parts));
    } else {
      inputs.push_back(std::move(base));
    }
  }
  return inputs;
}

// ---------------------------------------------------------------- heads

HeadOutputs HeadOutputs::slice(int begin, int count) const {
  HeadOutputs out;
  out.task = task;
  for (const auto& p : predictions) out.predictions.push_back(p.slice_batch(begin, count));
  return out;
}

void HeadOutputs::validate() const {
  if (predictions.empty()) throw ConfigError("head outputs are empty");
  for (const auto& p : predictions) {
    if (!(p.shape() == predictions[0].shape())) {
      throw ConfigError("head outputs have mismatched shapes");
    }
  }
}

Head::Head(TaskKind task, int in_channels, int outputs, int hidden, int index,
           Rng& rng)
    : task_(task) {
  const std::string name = "head" + std::to_string(index);
  if (task == TaskKind::kClassification) {
    net_.emplace<nn::GlobalAvgPool>();
    net_.emplace<nn::Linear>(name + ".fc", in_channels, outputs).init_fan_in(rng);
  } else {
    net_.emplace<nn::Conv2d>(name + ".conv1", in_channels, hidden, 1)
        .init_fan_in(rng);
    net_.emplace<nn::Activation>(name + ".act", nn::ActivationKind::kReLU);
    net_.emplace<nn::Conv2d>(name + ".conv2", hidden, outputs, 1)
        .init_fan_in(rng, 1.0);
  }
}

HeadOutputs heads_forward(std::span<const Tensor> inputs, std::span<Head> heads,
                          bool train) {
  if (inputs.size() != heads.size() || inputs.empty()) {
    throw ConfigError("heads_forward: need one input per head");
  }
  for (const auto& in : inputs) {
    if (!(in.shape() == inputs[0].shape())) {
      throw ConfigError("heads_forward: head inputs differ in shape");
    }
  }
  HeadOutputs out;
  out.task = heads[0].task();
  for (std::size_t m = 0; m < heads.size(); ++m) {
    Tensor raw = heads[m].forward(inputs[m], train);
    out.predictions.push_back(out.task == TaskKind::kClassification
                                  ? nn::softmax(raw)
                                  : std::move(raw));
  }
  return out;
}

// ---------------------------------------------------------------- model

void ModelSpec::validate() const {
  ensemble.validate();
  if (outputs < (task == TaskKind::kClassification ? 2 : 1)) {
    throw ConfigError("model needs >= 2 classes or >= 1 keypoint");
  }
  if (backbone.in_channels < 1 || backbone.width < 1 || backbone.pool_stages < 0) {
    throw ConfigError("invalid backbone geometry");
  }
  if (backbone.feature_channels != ensemble.feature_channels) {
    throw ConfigError("backbone feature channels must equal C_F");
  }
  if (head_hidden < 1) throw ConfigError("head_hidden must be >= 1");
}

nn::Sequential make_backbone(const BackboneSpec& spec, Rng& rng) {
  nn::Sequential net;
  int in = spec.in_channels;
  for (int s = 0; s < spec.pool_stages; ++s) {
    const int out = spec.width << s;
    net.emplace<nn::Conv2d>("backbone.conv" + std::to_string(s), in, out, 3, 1, 1)
        .init_fan_in(rng);
    net.emplace<nn::Activation>("backbone.act" + std::to_string(s),
                                nn::ActivationKind::kReLU);
    net.emplace<nn::MaxPool2d>();
    in = out;
  }
  net.emplace<nn::Conv2d>("backbone.out", in, spec.feature_channels, 3, 1, 1)
      .init_fan_in(rng);
  net.emplace<nn::Activation>("backbone.act_out", nn::ActivationKind::kReLU);
  return net;
}

EnsembleModel::EnsembleModel(ModelSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)) {
  spec_.validate();
  const EnsembleConfig& cfg = spec_.ensemble;
  Rng backbone_rng = make_rng(seed, "model.backbone");
  backbone_ = make_backbone(spec_.backbone, backbone_rng);
  if (cfg.has_expansion()) {
    Rng r = make_rng(seed, "model.expansion");
    expansion_.emplace(cfg, r);
  }
  if (cfg.has_adapters()) {
    for (const auto& a : cfg.adapters) {
      Rng r = make_rng(seed, "model.adapter", a.index);
      adapters_.emplace_back(a, cfg.shared_channels(), r,
                             spec_.zero_init_adapters);
    }
  }
  for (int m = 0; m < cfg.heads; ++m) {
    Rng r = make_rng(seed, "model.head", m);
    heads_.emplace_back(spec_.task, cfg.head_input_channels(), spec_.outputs,
                        spec_.head_hidden, m + 1, r);
  }
}

EnsembleModel::Trace EnsembleModel::forward(const Tensor& images, bool train) {
  const EnsembleConfig& cfg = spec_.ensemble;
  Trace t;
  t.feature = backbone_.forward(images, train);
  if (expansion_) {
    SharedPrivate sp =
        split_shared_private(expansion_->forward(t.feature, train), cfg);
    t.shared = std::move(sp.shared);
    t.privates = std::move(sp.privates);
  } else {
    t.shared = t.feature;
  }
  for (auto& a : adapters_) t.deltas.push_back(a.forward(t.shared, train));
  t.head_inputs =
      assemble_head_inputs(cfg.variant, cfg.heads, t.shared, t.deltas, t.privates);
  t.outputs.task = spec_.task;
  for (int m = 0; m < cfg.heads; ++m) {
    t.raw.push_back(heads_[m].forward(t.head_inputs[m], train));
    t.outputs.predictions.push_back(spec_.task == TaskKind::kClassification
                                        ? nn::softmax(t.raw.back())
                                        : t.raw.back());
  }
  return t;
}

void EnsembleModel::backward(std::span<const Tensor> grad_raw,
                             std::span<const Tensor> grad_privates) {
  const EnsembleConfig& cfg = spec_.ensemble;
  if (static_cast<int>(grad_raw.size()) != cfg.heads) {
    throw ConfigError("backward: need one gradient per head");
  }
  if (!grad_privates.empty() &&
      (!cfg.has_private() || static_cast<int>(grad_privates.size()) != cfg.heads)) {
    throw ConfigError("backward: private gradients need a split variant");
  }
  std::vector<Tensor> g_in;
  g_in.reserve(cfg.heads);
  for (int m = 0; m < cfg.heads; ++m) g_in.push_back(heads_[m].backward(grad_raw[m]));

  const int ch = cfg.shared_channels();
  Tensor g_shared;
  std::vector<Tensor> g_priv;
  for (int m = 0; m < cfg.heads; ++m) {
    Tensor gs = cfg.has_private() ? g_in[m].slice_channels(0, ch) : g_in[m];
    if (cfg.has_private()) {
      Tensor gp = g_in[m].slice_channels(ch, cfg.private_channels);
      if (!grad_privates.empty()) gp += grad_privates[m];
      g_priv.push_back(std::move(gp));
    }
    if (cfg.has_adapters()) gs += adapters_[m].backward(gs);
    if (m == 0) {
      g_shared = std::move(gs);
    } else {
      g_shared += gs;
    }
  }
  Tensor g_feature = expansion_
                         ? expansion_->backward(merge_shared_private(g_shared, g_priv))
                         : std::move(g_shared);
  backbone_.backward(g_feature);
}

std::vector<nn::Parameter*> EnsembleModel::parameters() {
  std::vector<nn::Parameter*> out = backbone_.parameters();
  auto append = [&out](std::vector<nn::Parameter*> p) {
    out.insert(out.end(), p.begin(), p.end());
  };
  if (expansion_) append(expansion_->parameters());
  for (auto& a : adapters_) append(a.parameters());
  for (auto& h : heads_) append(h.parameters());
  return out;
}

std::size_t EnsembleModel::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->size();
  return n;
}

}  // namespace dsa
