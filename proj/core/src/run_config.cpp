#include "dsa/run_config.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

namespace dsa {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"task", {"kind"}},
      {"data",
       {"dir", "classes", "keypoints", "image_size", "channels", "labeled",
        "unlabeled", "test", "separability", "label_noise"}},
      {"model",
       {"variant", "heads", "feature_channels", "private_channels", "width",
        "pool_stages", "head_hidden", "zero_init_adapters", "activations"}},
      {"ssl",
       {"tau", "mu", "batch_size", "lambda_u", "lambda_lb", "pseudo_label",
        "supervised_only", "heatmap_sigma"}},
      {"optim", {"lr", "momentum", "nesterov", "weight_decay"}},
      {"run", {"epochs", "seeds", "output", "eval_batch", "probe_size"}},
      {"ablation", {"variants"}},
  };
  return keys;
}

void check_known(const std::string& section, const std::string& key) {
  const auto& keys = known_keys();
  const auto it = keys.find(section);
  if (it == keys.end()) throw ConfigError("unknown config section [" + section + "]");
  if (!it->second.contains(key)) {
    throw ConfigError("unknown config key " + section + "." + key);
  }
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  const std::string* raw(const std::string& path) const {
    const auto v = tree_.get_optional<std::string>(pt::ptree::path_type(path, '.'));
    if (!v) return nullptr;
    cache_ = trim(*v);
    return &cache_;
  }

  void get(const std::string& path, int& out) const {
    if (const auto* s = raw(path)) {
      std::size_t used = 0;
      try {
        out = std::stoi(*s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != s->size()) fail(path, "an integer", *s);
    }
  }
  void get(const std::string& path, double& out) const {
    if (const auto* s = raw(path)) {
      std::size_t used = 0;
      try {
        out = std::stod(*s, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != s->size()) fail(path, "a number", *s);
    }
  }
  void get(const std::string& path, bool& out) const {
    if (const auto* s = raw(path)) {
      if (*s == "true" || *s == "1" || *s == "yes" || *s == "on") {
        out = true;
      } else if (*s == "false" || *s == "0" || *s == "no" || *s == "off") {
        out = false;
      } else {
        fail(path, "a boolean", *s);
      }
    }
  }
  void get(const std::string& path, std::string& out) const {
    if (const auto* s = raw(path)) out = *s;
  }

  template <typename Fn>
  void get_parsed(const std::string& path, Fn&& fn) const {
    if (const auto* s = raw(path)) {
      try {
        fn(*s);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(path + ": " + e.what());
      }
    }
  }

 private:
  [[noreturn]] static void fail(const std::string& path, const char* what,
                                const std::string& got) {
    throw ConfigError(path + ": expected " + what + ", got '" + got + "'");
  }

  const pt::ptree& tree_;
  mutable std::string cache_;
};

template <typename T>
std::string join(const std::vector<T>& v, auto&& fmt) {
  std::string s;
  for (const auto& x : v) {
    if (!s.empty()) s += ",";
    s += fmt(x);
  }
  return s;
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

ModelSpec RunConfig::model_spec() const { return model_spec(variant); }

ModelSpec RunConfig::model_spec(Variant v) const {
  ModelSpec m;
  m.task = task;
  m.outputs = task == TaskKind::kClassification ? data.classification.classes
                                                : data.keypoints.keypoints;
  m.head_hidden = head_hidden;
  m.zero_init_adapters = zero_init_adapters;
  m.backbone.in_channels = task == TaskKind::kClassification
                               ? data.classification.channels
                               : data.keypoints.channels;
  m.backbone.width = backbone_width;
  m.backbone.feature_channels = feature_channels;
  m.backbone.pool_stages = pool_stages;
  const int M = v == Variant::kSingle ? 1 : heads;
  std::optional<int> cg;
  if (private_channels > 0) cg = private_channels;
  m.ensemble = make_ensemble_config(v, M, feature_channels, cg);
  if (!activations.empty() && m.ensemble.has_adapters()) {
    if (static_cast<int>(activations.size()) != M) {
      throw ConfigError("model.activations: need exactly one activation per head");
    }
    for (int i = 0; i < M; ++i) m.ensemble.adapters[i].activation = activations[i];
    m.ensemble.validate();
  }
  return m;
}

void RunConfig::validate() const {
  try {
    trainer.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("ssl/optim: ") + e.what());
  }
  if (epochs < 1) throw ConfigError("run.epochs: must be >= 1");
  if (seeds.empty()) throw ConfigError("run.seeds: at least one seed required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("run.seeds: seeds must be distinct");
  }
  if (output.empty()) throw ConfigError("run.output: must not be empty");
  try {
    if (task == TaskKind::kClassification) {
      data.classification.validate();
    } else {
      data.keypoints.validate();
    }
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  if (!(data.label_noise >= 0.0 && data.label_noise < 1.0)) {
    throw ConfigError("data.label_noise: must lie in [0, 1)");
  }
  if (data.label_noise > 0.0 && task != TaskKind::kClassification) {
    throw ConfigError("data.label_noise: only valid for classification");
  }
  const int size = task == TaskKind::kClassification ? data.classification.image_size
                                                      : data.keypoints.image_size;
  if (pool_stages < 0 || (size >> pool_stages) < 1) {
    throw ConfigError("model.pool_stages: image too small for this many poolings");
  }
  if (task == TaskKind::kKeypoints && (size % (1 << pool_stages)) != 0) {
    throw ConfigError("model.pool_stages: keypoint image size must be divisible by the stride");
  }
  auto check_variant = [&](Variant v) {
    try {
      model_spec(v).validate();
    } catch (const ConfigError& e) {
      throw ConfigError("model (" + std::string(variant_id(v)) + "): " + e.what());
    }
  };
  check_variant(variant);
  if (!activations.empty() && !model_spec().ensemble.has_adapters()) {
    throw ConfigError("model.activations: adapters are only valid for sdoas/dsa, not " +
                      std::string(variant_id(variant)));
  }
  for (Variant v : ablation_variants) check_variant(v);
  if (variant == Variant::kCbe && heads < 2) {
    throw ConfigError("model.heads: cbe needs at least two heads");
  }
}

std::string RunConfig::to_ini() const {
  std::ostringstream os;
  os << "[task]\nkind = " << task_id(task) << "\n\n";
  const auto& c = data.classification;
  const auto& k = data.keypoints;
  const bool cls = task == TaskKind::kClassification;
  os << "[data]\n";
  if (!data.dir.empty()) os << "dir = " << data.dir.string() << "\n";
  if (cls) {
    os << "classes = " << c.classes << "\n";
  } else {
    os << "keypoints = " << k.keypoints << "\n";
  }
  os << "image_size = " << (cls ? c.image_size : k.image_size) << "\n"
     << "channels = " << (cls ? c.channels : k.channels) << "\n"
     << "labeled = " << (cls ? c.labeled : k.labeled) << "\n"
     << "unlabeled = " << (cls ? c.unlabeled : k.unlabeled) << "\n"
     << "test = " << (cls ? c.test : k.test) << "\n";
  if (cls) {
    os << "separability = " << num(c.separability) << "\n"
       << "label_noise = " << num(data.label_noise) << "\n";
  }
  os << "\n[model]\n"
     << "variant = " << variant_id(variant) << "\n"
     << "heads = " << heads << "\n"
     << "feature_channels = " << feature_channels << "\n"
     << "private_channels = " << private_channels << "\n"
     << "width = " << backbone_width << "\n"
     << "pool_stages = " << pool_stages << "\n"
     << "head_hidden = " << head_hidden << "\n"
     << "zero_init_adapters = " << (zero_init_adapters ? "true" : "false") << "\n";
  if (!activations.empty()) {
    os << "activations = "
       << join(activations, [](nn::ActivationKind a) { return std::string(nn::activation_id(a)); })
       << "\n";
  }
  os << "\n[ssl]\n"
     << "tau = " << num(trainer.threshold.tau) << "\n"
     << "mu = " << trainer.mu << "\n"
     << "batch_size = " << trainer.batch_size << "\n"
     << "lambda_u = " << num(trainer.lambda_u) << "\n"
     << "lambda_lb = " << num(trainer.lambda_lb) << "\n"
     << "pseudo_label = " << pseudo_label_mode_id(trainer.pseudo_label_mode) << "\n"
     << "supervised_only = " << (trainer.supervised_only ? "true" : "false") << "\n"
     << "heatmap_sigma = " << num(trainer.heatmap_sigma) << "\n";
  os << "\n[optim]\n"
     << "lr = " << num(trainer.sgd.learning_rate) << "\n"
     << "momentum = " << num(trainer.sgd.momentum) << "\n"
     << "nesterov = " << (trainer.sgd.nesterov ? "true" : "false") << "\n"
     << "weight_decay = " << num(trainer.sgd.weight_decay) << "\n";
  os << "\n[run]\n"
     << "epochs = " << epochs << "\n"
     << "seeds = " << join(seeds, [](std::uint64_t s) { return std::to_string(s); }) << "\n"
     << "output = " << output.string() << "\n"
     << "eval_batch = " << trainer.eval_batch << "\n"
     << "probe_size = " << trainer.probe_size << "\n";
  if (!ablation_variants.empty()) {
    os << "\n[ablation]\nvariants = "
       << join(ablation_variants, [](Variant v) { return std::string(variant_id(v)); })
       << "\n";
  }
  return os.str();
}

void RunConfig::write(const fs::path& file) const {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << to_ini();
}

RunConfig RunConfig::parse(const std::string& text,
                           const std::vector<std::string>& overrides) {
  pt::ptree tree;
  try {
    std::istringstream is(text);
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("config key '" + section + "' must be inside a section");
    }
    if (!known_keys().contains(section)) {
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, value] : body) check_known(section, key);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    const auto dot = o.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
      throw ConfigError("override '" + o + "' must look like section.key=value");
    }
    const std::string section = trim(o.substr(0, dot));
    const std::string key = trim(o.substr(dot + 1, eq - dot - 1));
    check_known(section, key);
    tree.put(pt::ptree::path_type(section + "." + key, '.'), trim(o.substr(eq + 1)));
  }

  RunConfig c;
  const Reader r(tree);
  r.get_parsed("task.kind", [&](const std::string& s) { c.task = parse_task(s); });

  std::string dir;
  r.get("data.dir", dir);
  c.data.dir = dir;
  auto& cl = c.data.classification;
  auto& kp = c.data.keypoints;
  r.get("data.classes", cl.classes);
  r.get("data.keypoints", kp.keypoints);
  for (int* target : {&cl.image_size, &kp.image_size}) r.get("data.image_size", *target);
  for (int* target : {&cl.channels, &kp.channels}) r.get("data.channels", *target);
  for (int* target : {&cl.labeled, &kp.labeled}) r.get("data.labeled", *target);
  for (int* target : {&cl.unlabeled, &kp.unlabeled}) r.get("data.unlabeled", *target);
  for (int* target : {&cl.test, &kp.test}) r.get("data.test", *target);
  r.get("data.separability", cl.separability);
  r.get("data.label_noise", c.data.label_noise);

  r.get_parsed("model.variant", [&](const std::string& s) { c.variant = parse_variant(s); });
  r.get("model.heads", c.heads);
  r.get("model.feature_channels", c.feature_channels);
  r.get("model.private_channels", c.private_channels);
  r.get("model.width", c.backbone_width);
  r.get("model.pool_stages", c.pool_stages);
  r.get("model.head_hidden", c.head_hidden);
  r.get("model.zero_init_adapters", c.zero_init_adapters);
  r.get_parsed("model.activations", [&](const std::string& s) {
    for (const auto& a : split_list(s)) c.activations.push_back(nn::parse_activation(a));
  });
  if (c.variant == Variant::kSingle && !tree.get_optional<std::string>("model.heads")) {
    c.heads = 1;
  }

  r.get("ssl.tau", c.trainer.threshold.tau);
  r.get("ssl.mu", c.trainer.mu);
  r.get("ssl.batch_size", c.trainer.batch_size);
  r.get("ssl.lambda_u", c.trainer.lambda_u);
  r.get("ssl.lambda_lb", c.trainer.lambda_lb);
  r.get_parsed("ssl.pseudo_label", [&](const std::string& s) {
    c.trainer.pseudo_label_mode = parse_pseudo_label_mode(s);
  });
  r.get("ssl.supervised_only", c.trainer.supervised_only);
  r.get("ssl.heatmap_sigma", c.trainer.heatmap_sigma);

  r.get("optim.lr", c.trainer.sgd.learning_rate);
  r.get("optim.momentum", c.trainer.sgd.momentum);
  r.get("optim.nesterov", c.trainer.sgd.nesterov);
  r.get("optim.weight_decay", c.trainer.sgd.weight_decay);

  r.get("run.epochs", c.epochs);
  r.get_parsed("run.seeds", [&](const std::string& s) {
    c.seeds.clear();
    for (const auto& item : split_list(s)) {
      std::size_t used = 0;
      const auto v = std::stoull(item, &used);
      if (used != item.size() || item.front() == '-') {
        throw ConfigError("expected non-negative integers, got '" + item + "'");
      }
      c.seeds.push_back(v);
    }
  });
  std::string output;
  r.get("run.output", output);
  if (!output.empty()) c.output = output;
  r.get("run.eval_batch", c.trainer.eval_batch);
  r.get("run.probe_size", c.trainer.probe_size);

  r.get_parsed("ablation.variants", [&](const std::string& s) {
    for (const auto& v : split_list(s)) c.ablation_variants.push_back(parse_variant(v));
  });

  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& file, const std::vector<std::string>& overrides) {
  std::ifstream is(file);
  if (!is) throw ConfigError("cannot open config file " + file.string());
  std::ostringstream text;
  text << is.rdbuf();
  return parse(text.str(), overrides);
}

// ----------------------------------------------------------------- data

Dataset make_run_dataset(const RunConfig& cfg, std::uint64_t seed) {
  if (cfg.data.dir.empty()) {
    const std::uint64_t data_seed = derive_seed(seed, "dataset");
    return cfg.task == TaskKind::kClassification
               ? synth_classification(cfg.data.classification, data_seed)
               : synth_keypoints(cfg.data.keypoints, data_seed);
  }
  Dataset d = read_dataset(cfg.data.dir);
  const auto& m = d.manifest;
  if (m.task != cfg.task) throw ConfigError("data.dir: dataset task differs from task.kind");
  const bool cls = cfg.task == TaskKind::kClassification;
  const int outputs = cls ? cfg.data.classification.classes : cfg.data.keypoints.keypoints;
  const int channels = cls ? cfg.data.classification.channels : cfg.data.keypoints.channels;
  const int size = cls ? cfg.data.classification.image_size : cfg.data.keypoints.image_size;
  if ((cls ? m.classes : m.keypoints) != outputs || m.channels != channels ||
      m.image_size != size) {
    throw ConfigError("data.dir: manifest classes/keypoints, channels or image_size "
                      "disagree with the config");
  }
  return d;
}

NoisyLabels make_run_labels(const RunConfig& cfg, const Dataset& data,
                            std::uint64_t seed) {
  if (cfg.task != TaskKind::kClassification) return {};
  return inject_label_noise(data.labeled.labels, data.manifest.classes,
                            cfg.data.label_noise, derive_seed(seed, "label_noise"));
}

}  // namespace dsa
