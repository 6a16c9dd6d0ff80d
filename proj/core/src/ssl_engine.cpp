#include "dsa/ssl_engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "dsa/decorrelation.hpp"

namespace dsa {

void ThresholdPolicy::validate() const {
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("threshold tau must lie in (0, 1)");
}

std::string_view pseudo_label_mode_id(PseudoLabelMode m) {
  switch (m) {
    case PseudoLabelMode::kLiteral: return "literal";
    case PseudoLabelMode::kRenormalize: return "renormalize";
    case PseudoLabelMode::kHard: return "hard";
  }
  return "literal";
}

PseudoLabelMode parse_pseudo_label_mode(std::string_view id) {
  for (auto m : {PseudoLabelMode::kLiteral, PseudoLabelMode::kRenormalize,
                 PseudoLabelMode::kHard}) {
    if (pseudo_label_mode_id(m) == id) return m;
  }
  throw ConfigError("unknown pseudo-label mode '" + std::string(id) +
                    "' (expected literal, renormalize, hard)");
}

int PseudoLabelBatch::valid_count() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), 1));
}

namespace {

constexpr double kMinProb = 1e-300;

void require_classification(const HeadOutputs& outputs, const char* what) {
  outputs.validate();
  if (outputs.task != TaskKind::kClassification) {
    throw ConfigError(std::string(what) + ": classification outputs required");
  }
}

void require_keypoints(const HeadOutputs& outputs, const char* what) {
  outputs.validate();
  if (outputs.task != TaskKind::kKeypoints) {
    throw ConfigError(std::string(what) + ": heatmap outputs required");
  }
}

void check_labels(const HeadOutputs& outputs, std::span<const int> labels) {
  if (static_cast<int>(labels.size()) != outputs.batch()) {
    throw InputError("label count does not match batch size");
  }
  for (int y : labels) {
    if (y < 0 || y >= outputs.outputs()) {
      throw InputError("label " + std::to_string(y) + " out of range [0, " +
                       std::to_string(outputs.outputs()) + ")");
    }
  }
}

int argmax(const double* p, int n) {
  int best = 0;
  for (int c = 1; c < n; ++c) {
    if (p[c] > p[best]) best = c;
  }
  return best;
}

}  // namespace

// ------------------------------------------------------------- supervised

LossGrad supervised_loss_with_grad(const HeadOutputs& outputs,
                                   std::span<const int> labels) {
  require_classification(outputs, "supervised_loss");
  check_labels(outputs, labels);
  const int N = outputs.batch(), K = outputs.outputs(), M = outputs.heads();
  const double scale = 1.0 / (static_cast<double>(N) * M);
  LossGrad out;
  for (const auto& p : outputs.predictions) {
    Tensor g = p;
    for (int i = 0; i < N; ++i) {
      const double* pi = p.data() + static_cast<std::size_t>(i) * K;
      out.value -= std::log(std::max(pi[labels[i]], kMinProb)) * scale;
      double* gi = g.data() + static_cast<std::size_t>(i) * K;
      for (int c = 0; c < K; ++c) gi[c] *= scale;
      gi[labels[i]] -= scale;
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

double supervised_loss(const HeadOutputs& outputs, std::span<const int> labels) {
  return supervised_loss_with_grad(outputs, labels).value;
}

LossGrad heatmap_loss_with_grad(const HeadOutputs& outputs, const Tensor& targets) {
  require_keypoints(outputs, "heatmap_loss");
  if (!(targets.shape() == outputs.predictions[0].shape())) {
    throw InputError("heatmap targets " + targets.shape().str() +
                     " do not match predictions " + outputs.predictions[0].shape().str());
  }
  const int M = outputs.heads();
  const double scale = 1.0 / (static_cast<double>(targets.size()) * M);
  LossGrad out;
  for (const auto& p : outputs.predictions) {
    Tensor g(p.shape());
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double d = p.data()[j] - targets.data()[j];
      out.value += d * d * scale;
      g.data()[j] = 2.0 * d * scale;
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

double heatmap_loss(const HeadOutputs& outputs, const Tensor& targets) {
  return heatmap_loss_with_grad(outputs, targets).value;
}

// ---------------------------------------------------------- pseudo-labels

PseudoLabelBatch ensemble_pseudo_label(const HeadOutputs& outputs,
                                       const ThresholdPolicy& policy,
                                       PseudoLabelMode mode) {
  require_classification(outputs, "ensemble_pseudo_label");
  policy.validate();
  const int N = outputs.batch(), K = outputs.outputs(), M = outputs.heads();
  PseudoLabelBatch out;
  out.targets = Tensor(outputs.predictions[0].shape());
  out.valid.assign(N, 0);
  for (int i = 0; i < N; ++i) {
    double* t = out.targets.data() + static_cast<std::size_t>(i) * K;
    int passing = 0;
    for (int m = 0; m < M; ++m) {
      const double* p = outputs.predictions[m].data() + static_cast<std::size_t>(i) * K;
      if (*std::max_element(p, p + K) > policy.tau) {
        ++passing;
        for (int c = 0; c < K; ++c) t[c] += p[c];
      }
    }
    if (passing == 0) continue;
    out.valid[i] = 1;
    const double denom = mode == PseudoLabelMode::kRenormalize ? passing : M;
    for (int c = 0; c < K; ++c) t[c] /= denom;
    if (mode == PseudoLabelMode::kHard) {
      const int best = argmax(t, K);
      std::fill(t, t + K, 0.0);
      t[best] = 1.0;
    }
  }
  return out;
}

PseudoLabelBatch heatmap_pseudo_label(const HeadOutputs& outputs,
                                      const ThresholdPolicy& policy) {
  require_keypoints(outputs, "heatmap_pseudo_label");
  policy.validate();
  const Shape& s = outputs.predictions[0].shape();
  const int M = outputs.heads();
  const std::size_t plane = s.plane();
  PseudoLabelBatch out;
  out.targets = Tensor(s);
  out.valid.assign(s.n, 0);
  out.channel_valid.assign(static_cast<std::size_t>(s.n) * s.c, 0);
  for (int i = 0; i < s.n; ++i) {
    for (int k = 0; k < s.c; ++k) {
      const std::size_t off = outputs.predictions[0].index(i, k, 0, 0);
      double* t = out.targets.data() + off;
      int passing = 0;
      for (int m = 0; m < M; ++m) {
        const double* p = outputs.predictions[m].data() + off;
        if (*std::max_element(p, p + plane) > policy.tau) {
          ++passing;
          for (std::size_t j = 0; j < plane; ++j) t[j] += p[j];
        }
      }
      if (passing == 0) continue;
      for (std::size_t j = 0; j < plane; ++j) t[j] /= passing;
      out.channel_valid[static_cast<std::size_t>(i) * s.c + k] = 1;
      out.valid[i] = 1;
    }
  }
  return out;
}

LossGrad ensemble_loss_with_grad(const HeadOutputs& outputs,
                                 const PseudoLabelBatch& pseudo) {
  require_classification(outputs, "ensemble_loss");
  const int N = outputs.batch(), K = outputs.outputs(), M = outputs.heads();
  if (!(pseudo.targets.shape() == outputs.predictions[0].shape()) ||
      static_cast<int>(pseudo.valid.size()) != N) {
    throw InputError("pseudo-labels are not aligned with the outputs");
  }
  const double scale = 1.0 / (static_cast<double>(N) * M);
  LossGrad out;
  for (const auto& p : outputs.predictions) {
    Tensor g(p.shape());
    for (int i = 0; i < N; ++i) {
      if (!pseudo.valid[i]) continue;
      const std::size_t off = static_cast<std::size_t>(i) * K;
      const double* pi = p.data() + off;
      const double* t = pseudo.targets.data() + off;
      double mass = 0.0;
      for (int c = 0; c < K; ++c) {
        mass += t[c];
        if (t[c] != 0.0) out.value -= t[c] * std::log(std::max(pi[c], kMinProb)) * scale;
      }
      for (int c = 0; c < K; ++c) g.data()[off + c] = (pi[c] * mass - t[c]) * scale;
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

double ensemble_loss(const HeadOutputs& outputs, const PseudoLabelBatch& pseudo) {
  return ensemble_loss_with_grad(outputs, pseudo).value;
}

LossGrad heatmap_ensemble_loss_with_grad(const HeadOutputs& outputs,
                                         const PseudoLabelBatch& pseudo) {
  require_keypoints(outputs, "heatmap_ensemble_loss");
  const Shape& s = outputs.predictions[0].shape();
  if (!(pseudo.targets.shape() == s) ||
      pseudo.channel_valid.size() != static_cast<std::size_t>(s.n) * s.c) {
    throw InputError("pseudo-heatmaps are not aligned with the outputs");
  }
  const double scale = 1.0 / (static_cast<double>(s.size()) * outputs.heads());
  const std::size_t plane = s.plane();
  LossGrad out;
  for (const auto& p : outputs.predictions) {
    Tensor g(s);
    for (std::size_t ch = 0; ch < pseudo.channel_valid.size(); ++ch) {
      if (!pseudo.channel_valid[ch]) continue;
      for (std::size_t j = ch * plane; j < (ch + 1) * plane; ++j) {
        const double d = p.data()[j] - pseudo.targets.data()[j];
        out.value += d * d * scale;
        g.data()[j] = 2.0 * d * scale;
      }
    }
    out.grad.push_back(std::move(g));
  }
  return out;
}

// -------------------------------------------------------------- inference

std::vector<int> ensemble_infer(const HeadOutputs& outputs) {
  require_classification(outputs, "ensemble_infer");
  const int N = outputs.batch(), K = outputs.outputs();
  std::vector<int> out(N);
  std::vector<double> mean(K);
  for (int i = 0; i < N; ++i) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (const auto& p : outputs.predictions) {
      const double* pi = p.data() + static_cast<std::size_t>(i) * K;
      for (int c = 0; c < K; ++c) mean[c] += pi[c];
    }
    out[i] = argmax(mean.data(), K);
  }
  return out;
}

std::vector<int> head_predictions(const HeadOutputs& outputs, int head) {
  require_classification(outputs, "head_predictions");
  const int N = outputs.batch(), K = outputs.outputs();
  std::vector<int> out(N);
  const Tensor& p = outputs.predictions.at(head);
  for (int i = 0; i < N; ++i) out[i] = argmax(p.data() + static_cast<std::size_t>(i) * K, K);
  return out;
}

KeypointSet ensemble_infer_keypoints(const HeadOutputs& outputs, int stride) {
  require_keypoints(outputs, "ensemble_infer_keypoints");
  Tensor mean(outputs.predictions[0].shape());
  for (const auto& p : outputs.predictions) mean += p;
  mean *= 1.0 / outputs.heads();
  return decode_heatmaps(mean, stride);
}

Tensor warp_heatmaps(const Tensor& heatmaps, std::span<const Affine> transforms,
                     int stride) {
  if (static_cast<int>(transforms.size()) != heatmaps.n()) {
    throw InputError("warp_heatmaps: one transform per sample required");
  }
  const double off = 0.5 * (stride - 1);
  Affine to_image{static_cast<double>(stride), 0, 0, static_cast<double>(stride), off, off};
  const Affine to_heat = to_image.inverse();
  std::vector<Tensor> parts;
  for (int i = 0; i < heatmaps.n(); ++i) {
    const Affine t = to_heat.compose(transforms[i]).compose(to_image);
    parts.push_back(warp_affine(heatmaps.slice_batch(i, 1), t));
  }
  return Tensor::concat_batch(parts);
}

// --------------------------------------------------------------- trainer

void TrainerOptions::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (mu < 1) throw ConfigError("mu must be an integer >= 1");
  threshold.validate();
  if (!(lambda_u >= 0.0) || !(lambda_lb >= 0.0)) {
    throw ConfigError("loss weights must be non-negative");
  }
  if (!(sgd.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(sgd.momentum >= 0.0 && sgd.momentum < 1.0)) {
    throw ConfigError("momentum must lie in [0, 1)");
  }
  if (!(sgd.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(heatmap_sigma > 0.0)) throw ConfigError("heatmap sigma must be positive");
  for (double t : pck_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("PCK thresholds must lie in (0, 1]");
  }
  if (eval_batch < 1 || probe_size < 1) throw ConfigError("eval sizes must be >= 1");
}

Trainer::Trainer(EnsembleModel& model, const Dataset& data, TrainerOptions options,
                 std::uint64_t seed, std::vector<int> labels)
    : model_(model),
      data_(data),
      options_(std::move(options)),
      seed_(seed),
      labels_(std::move(labels)),
      sgd_(model.parameters(), options_.sgd) {
  options_.validate();
  data.manifest.validate();
  const ModelSpec& spec = model.spec();
  if (spec.task != data.manifest.task) throw ConfigError("model and dataset tasks differ");
  if (spec.backbone.in_channels != data.manifest.channels) {
    throw ConfigError("model input channels differ from the dataset's");
  }
  const int expected_outputs = spec.task == TaskKind::kClassification
                                   ? data.manifest.classes
                                   : data.manifest.keypoints;
  if (spec.outputs != expected_outputs) {
    throw ConfigError("model outputs differ from the dataset's classes/keypoints");
  }
  stride_ = 1 << spec.backbone.pool_stages;
  heatmap_size_ = data.manifest.image_size >> spec.backbone.pool_stages;
  if (heatmap_size_ < 1) throw ConfigError("image too small for the backbone's pooling");
  if (labels_.empty()) labels_ = data.labeled.labels;
  if (spec.task == TaskKind::kClassification) {
    if (static_cast<int>(labels_.size()) != data.labeled.size()) {
      throw InputError("label override has the wrong length");
    }
    for (int y : labels_) {
      if (y < 0 || y >= data.manifest.classes) throw InputError("labeled class out of range");
    }
  }
  if (!options_.supervised_only && data.unlabeled.size() == 0) {
    throw ConfigError("SSL training needs a non-empty unlabeled split");
  }
  if (spec.ensemble.uses_lb_loss() && spec.ensemble.heads < 2) {
    throw ConfigError("LB loss needs at least two heads");
  }
}

int Trainer::iterations_per_epoch() const {
  if (options_.supervised_only) {
    return (data_.labeled.size() + options_.batch_size - 1) / options_.batch_size;
  }
  const int per = options_.mu * options_.batch_size;
  return (data_.unlabeled.size() + per - 1) / per;
}

namespace {

AugmentationPolicy weak_policy(TaskKind t) {
  return t == TaskKind::kClassification ? AugmentationPolicy::weak_classification()
                                        : AugmentationPolicy::weak_keypoints();
}

AugmentationPolicy strong_policy(TaskKind t) {
  return t == TaskKind::kClassification ? AugmentationPolicy::strong_classification()
                                        : AugmentationPolicy::strong_keypoints();
}

/// `count` indices drawn as consecutive shuffled passes over [0, n).
std::vector<int> draw_indices(int n, std::size_t count, Rng& rng) {
  std::vector<int> out;
  out.reserve(count);
  std::vector<int> perm(n);
  while (out.size() < count) {
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (int i : perm) {
      if (out.size() == count) break;
      out.push_back(i);
    }
  }
  return out;
}

void hash_tensor(StreamHash& h, const Tensor& t) { h.update_values(t.data(), t.size()); }

}  // namespace

LabeledBatch Trainer::make_labeled_batch(std::span<const int> indices, Rng& rng,
                                         StreamHash& hash) const {
  const TaskKind task = data_.manifest.task;
  const auto policy = weak_policy(task);
  const Split& split = data_.labeled;
  LabeledBatch b;
  std::vector<Tensor> images;
  KeypointSet kps(static_cast<int>(indices.size()), data_.manifest.keypoints);
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const int i = indices[j];
    const Tensor img = split.images.slice_batch(i, 1);
    if (task == TaskKind::kClassification) {
      images.push_back(augment(img, nullptr, policy, {}, rng).image);
      b.labels.push_back(labels_[i]);
    } else {
      const KeypointSet one = split.keypoints.gather(std::span<const int>(&i, 1));
      auto a = augment(img, &one, policy, data_.manifest.flip_pairs, rng);
      images.push_back(std::move(a.image));
      for (int k = 0; k < kps.keypoints; ++k) {
        kps.x(static_cast<int>(j), k) = a.keypoints.x(0, k);
        kps.y(static_cast<int>(j), k) = a.keypoints.y(0, k);
      }
    }
  }
  b.images = Tensor::concat_batch(images);
  hash.update_values(indices.data(), indices.size());
  hash_tensor(hash, b.images);
  if (task == TaskKind::kClassification) {
    hash.update_values(b.labels.data(), b.labels.size());
  } else {
    b.heatmaps = render_heatmaps(kps, heatmap_size_, stride_, options_.heatmap_sigma);
    hash_tensor(hash, b.heatmaps);
  }
  return b;
}

UnlabeledViews Trainer::make_unlabeled_views(std::span<const int> indices,
                                             Rng& weak_rng, Rng& strong_rng,
                                             StreamHash& hash) const {
  const TaskKind task = data_.manifest.task;
  const auto weak = weak_policy(task);
  const auto strong = strong_policy(task);
  const auto& flips = data_.manifest.flip_pairs;
  const Split& split = data_.unlabeled;
  UnlabeledViews v;
  std::vector<Tensor> weak_images, strong_images;
  for (int i : indices) {
    const Tensor img = split.images.slice_batch(i, 1);
    auto w = augment(img, nullptr, weak, flips, weak_rng);
    auto s = augment(img, nullptr, strong, flips, strong_rng);
    weak_images.push_back(std::move(w.image));
    strong_images.push_back(std::move(s.image));
    v.weak_transforms.push_back(w.transform);
    v.strong_transforms.push_back(s.transform);
    v.weak_flipped.push_back(w.flipped ? 1 : 0);
    v.strong_flipped.push_back(s.flipped ? 1 : 0);
    v.truth.push_back(i < static_cast<int>(split.labels.size()) ? split.labels[i] : -1);
  }
  v.weak = Tensor::concat_batch(weak_images);
  v.strong = Tensor::concat_batch(strong_images);
  hash.update_values(indices.data(), indices.size());
  hash_tensor(hash, v.weak);
  hash_tensor(hash, v.strong);
  return v;
}

StepStats Trainer::step(const LabeledBatch& labeled, const UnlabeledViews* unlabeled) {
  const ModelSpec& spec = model_.spec();
  const bool classification = spec.task == TaskKind::kClassification;
  const bool ssl = !options_.supervised_only && unlabeled != nullptr;
  const int M = model_.heads();
  const int nl = labeled.images.n();
  StepStats st;

  PseudoLabelBatch pseudo;
  int nu = 0;
  if (ssl) {
    nu = unlabeled->weak.n();
    st.unlabeled = nu;
    const auto weak_out = model_.forward(unlabeled->weak, false).outputs;
    if (classification) {
      pseudo = ensemble_pseudo_label(weak_out, options_.threshold,
                                     options_.pseudo_label_mode);
      const int K = weak_out.outputs();
      for (int i = 0; i < nu; ++i) {
        if (!pseudo.valid[i] || unlabeled->truth[i] < 0) continue;
        ++st.pseudo_known;
        const double* t = pseudo.targets.data() + static_cast<std::size_t>(i) * K;
        st.pseudo_correct += argmax(t, K) == unlabeled->truth[i] ? 1 : 0;
      }
    } else {
      pseudo = heatmap_pseudo_label(weak_out, options_.threshold);
      // Move the targets from the weak view into the strong view.
      std::vector<Affine> rel;
      for (int i = 0; i < nu; ++i) {
        rel.push_back(unlabeled->strong_transforms[i].compose(
            unlabeled->weak_transforms[i].inverse()));
      }
      pseudo.targets = warp_heatmaps(pseudo.targets, rel, stride_);
      const int K = pseudo.targets.c();
      for (int i = 0; i < nu; ++i) {
        if (unlabeled->weak_flipped[i] == unlabeled->strong_flipped[i]) continue;
        for (const auto& [a, b] : data_.manifest.flip_pairs) {
          auto ta = pseudo.targets.sample(i).subspan(
              static_cast<std::size_t>(a) * pseudo.targets.shape().plane(),
              pseudo.targets.shape().plane());
          auto tb = pseudo.targets.sample(i).subspan(
              static_cast<std::size_t>(b) * pseudo.targets.shape().plane(),
              pseudo.targets.shape().plane());
          std::swap_ranges(ta.begin(), ta.end(), tb.begin());
          std::swap(pseudo.channel_valid[static_cast<std::size_t>(i) * K + a],
                    pseudo.channel_valid[static_cast<std::size_t>(i) * K + b]);
        }
      }
    }
    st.masked_in = pseudo.valid_count();
  }

  const Tensor input =
      ssl ? Tensor::concat_batch(std::vector<Tensor>{labeled.images, unlabeled->strong})
          : labeled.images;
  auto trace = model_.forward(input, true);
  const HeadOutputs lab_out = ssl ? trace.outputs.slice(0, nl) : trace.outputs;

  LossGrad sup = classification ? supervised_loss_with_grad(lab_out, labeled.labels)
                                : heatmap_loss_with_grad(lab_out, labeled.heatmaps);
  st.loss_supervised = sup.value;
  std::vector<Tensor> grad_raw = std::move(sup.grad);

  if (ssl) {
    const HeadOutputs un_out = trace.outputs.slice(nl, nu);
    LossGrad ens = classification ? ensemble_loss_with_grad(un_out, pseudo)
                                  : heatmap_ensemble_loss_with_grad(un_out, pseudo);
    st.loss_ensemble = ens.value;
    for (int m = 0; m < M; ++m) {
      ens.grad[m] *= options_.lambda_u;
      grad_raw[m] = Tensor::concat_batch(std::vector<Tensor>{grad_raw[m], ens.grad[m]});
    }
  }

  std::vector<Tensor> grad_privates;
  if (spec.ensemble.uses_lb_loss() && options_.lambda_lb > 0.0) {
    // LB loss on the unlabeled strong batch, or on the labeled batch when
    // there is no unlabeled stream.
    const int begin = ssl ? nl : 0;
    const int count = ssl ? nu : nl;
    std::vector<Tensor> part;
    for (const auto& g : trace.privates) part.push_back(g.slice_batch(begin, count));
    LbLossResult lb = lb_loss_with_grad(part);
    st.loss_lb = lb.value;
    for (int m = 0; m < M; ++m) {
      Tensor full(trace.privates[m].shape());
      lb.grad[m] *= options_.lambda_lb;
      std::copy(lb.grad[m].values().begin(), lb.grad[m].values().end(),
                full.data() + full.index(begin, 0, 0, 0));
      grad_privates.push_back(std::move(full));
    }
  }

  st.loss_total = st.loss_supervised + options_.lambda_u * st.loss_ensemble +
                  (spec.ensemble.uses_lb_loss() ? options_.lambda_lb * st.loss_lb : 0.0);
  if (!std::isfinite(st.loss_total)) {
    throw TrainingDiverged("non-finite training loss");
  }

  sgd_.zero_grad();
  model_.backward(grad_raw, grad_privates);
  sgd_.step();
  return st;
}

MetricsRecord Trainer::train_epoch(int epoch) {
  const auto start = std::chrono::steady_clock::now();
  const int iters = iterations_per_epoch();
  const std::size_t nb = options_.batch_size;
  const std::size_t nu = options_.supervised_only ? 0 : nb * options_.mu;

  Rng labeled_rng = make_rng(seed_, "data.labeled", epoch);
  Rng unlabeled_rng = make_rng(seed_, "data.unlabeled", epoch);
  Rng aug_labeled = make_rng(seed_, "augment.labeled", epoch);
  Rng aug_weak = make_rng(seed_, "augment.weak", epoch);
  Rng aug_strong = make_rng(seed_, "augment.strong", epoch);

  const auto labeled_idx = draw_indices(data_.labeled.size(), nb * iters, labeled_rng);
  std::vector<int> unlabeled_idx;
  if (nu > 0) unlabeled_idx = draw_indices(data_.unlabeled.size(), nu * iters, unlabeled_rng);

  StreamHash hash;
  MetricsRecord rec;
  rec.epoch = epoch;
  rec.seed = seed_;
  long masked = 0, total_unlabeled = 0, pseudo_correct = 0, pseudo_known = 0;
  for (int it = 0; it < iters; ++it) {
    const auto li = std::span<const int>(labeled_idx).subspan(it * nb, nb);
    const LabeledBatch lb = make_labeled_batch(li, aug_labeled, hash);
    StepStats st;
    if (nu > 0) {
      const auto ui = std::span<const int>(unlabeled_idx).subspan(it * nu, nu);
      const UnlabeledViews views = make_unlabeled_views(ui, aug_weak, aug_strong, hash);
      st = step(lb, &views);
    } else {
      st = step(lb, nullptr);
    }
    rec.loss_supervised += st.loss_supervised / iters;
    rec.loss_ensemble += st.loss_ensemble / iters;
    rec.loss_lb += st.loss_lb / iters;
    rec.loss_total += st.loss_total / iters;
    masked += st.masked_in;
    total_unlabeled += st.unlabeled;
    pseudo_correct += st.pseudo_correct;
    pseudo_known += st.pseudo_known;
  }
  rec.mask_rate = total_unlabeled > 0 ? static_cast<double>(masked) / total_unlabeled : 0.0;
  if (pseudo_known > 0) {
    rec.pseudo_label_accuracy = static_cast<double>(pseudo_correct) / pseudo_known;
  }
  rec.stream_checksum = hash.value();

  const Evaluation ev = evaluate(data_.test);
  rec.error_rate = ev.error_rate;
  rec.head_error_rates = ev.head_error_rates;
  rec.mean_head_error = ev.mean_head_error;
  rec.mse = ev.mse;
  rec.pck = ev.pck;
  rec.agreement = ev.agreement;
  rec.cosine = ev.cosine;
  rec.head_correlation = ev.head_correlation;
  rec.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

Evaluation Trainer::evaluate(const Split& split) {
  const ModelSpec& spec = model_.spec();
  const int M = model_.heads();
  const int N = split.size();
  if (N < 1) throw InputError("cannot evaluate an empty split");

  std::vector<std::vector<Tensor>> per_head(M);
  for (int begin = 0; begin < N; begin += options_.eval_batch) {
    const int count = std::min(options_.eval_batch, N - begin);
    auto out = model_.forward(split.images.slice_batch(begin, count), false).outputs;
    for (int m = 0; m < M; ++m) per_head[m].push_back(std::move(out.predictions[m]));
  }
  HeadOutputs outputs;
  outputs.task = spec.task;
  for (int m = 0; m < M; ++m) outputs.predictions.push_back(Tensor::concat_batch(per_head[m]));

  Evaluation ev;
  if (spec.task == TaskKind::kClassification) {
    ev.error_rate = error_rate(ensemble_infer(outputs), split.labels);
    double sum = 0.0;
    for (int m = 0; m < M; ++m) {
      ev.head_error_rates.push_back(error_rate(head_predictions(outputs, m), split.labels));
      sum += ev.head_error_rates.back();
    }
    ev.mean_head_error = sum / M;
  } else {
    const KeypointSet pred = ensemble_infer_keypoints(outputs, stride_);
    ev.mse = keypoint_mse(pred, split.keypoints);
    PckSpec ps;
    ps.pair_a = data_.manifest.normalization_pair.first;
    ps.pair_b = data_.manifest.normalization_pair.second;
    for (double t : options_.pck_thresholds) {
      ps.threshold = t;
      ev.pck[t] = pck(pred, split.keypoints, ps).value;
    }
  }

  if (M >= 2) {
    const auto sim = prediction_similarity(outputs);
    ev.agreement = sim.agreement;
    ev.cosine = sim.cosine;
    const int probe = std::min(options_.probe_size, N);
    const auto trace = model_.forward(split.images.slice_batch(0, probe), false);
    ev.head_correlation = mean_pairwise_head_correlation(trace.head_inputs).mean_off_diagonal();
  } else {
    ev.agreement = 1.0;
    ev.cosine = 1.0;
    ev.head_correlation = 1.0;
  }
  return ev;
}

}  // namespace dsa
