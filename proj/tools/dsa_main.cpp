// dsa: command-line front end for training, evaluation and diagnostics of
// multi-head ensembles with shared/private channels and adapters.

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dsa/checkpoint.hpp"
#include "dsa/data_noise.hpp"
#include "dsa/decorrelation.hpp"
#include "dsa/experiments.hpp"
#include "dsa/run_config.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CommonRunFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::string variant;
  std::string seeds;
  int epochs = 0;
  std::string output;
  bool force = false;

  void add(CLI::App* cmd) {
    cmd->add_option("--config", config, "Run configuration file")->required();
    cmd->add_option("--set", overrides, "Override a field: section.key=value");
    cmd->add_option("--variant", variant, "Shorthand for --set model.variant=...");
    cmd->add_option("--seeds", seeds, "Shorthand for --set run.seeds=...");
    cmd->add_option("--epochs", epochs, "Shorthand for --set run.epochs=...");
    cmd->add_option("--output", output, "Shorthand for --set run.output=...");
    cmd->add_flag("--force", force, "Overwrite a non-empty output directory");
  }

  dsa::RunConfig load() const {
    std::vector<std::string> all = overrides;
    if (!variant.empty()) all.push_back("model.variant=" + variant);
    if (!seeds.empty()) all.push_back("run.seeds=" + seeds);
    if (epochs > 0) all.push_back("run.epochs=" + std::to_string(epochs));
    if (!output.empty()) all.push_back("run.output=" + output);
    return dsa::RunConfig::load(config, all);
  }
};

void print_epoch(dsa::Variant v, const dsa::MetricsRecord& r) {
  std::printf("[%s seed %llu] epoch %3d  loss %.4f (sup %.4f ens %.4f lb %.4f)  mask %.3f",
              std::string(dsa::variant_id(v)).c_str(),
              static_cast<unsigned long long>(r.seed), r.epoch, r.loss_total,
              r.loss_supervised, r.loss_ensemble, r.loss_lb, r.mask_rate);
  if (r.error_rate) std::printf("  err %.4f", *r.error_rate);
  if (r.mean_head_error) std::printf("  head-err %.4f", *r.mean_head_error);
  if (r.mse) std::printf("  mse %.3f", *r.mse);
  std::printf("  agree %.3f  corr %.3f  %.1fs\n", r.agreement, r.head_correlation, r.seconds);
  std::fflush(stdout);
}

void write_file(const fs::path& file, const std::string& text) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << text;
}

dsa::Dataset probe_dataset(const std::string& data_dir, const std::string& config,
                           std::uint64_t seed) {
  if (!data_dir.empty()) return dsa::read_dataset(data_dir);
  if (!config.empty()) return dsa::make_run_dataset(dsa::RunConfig::load(config), seed);
  throw dsa::ConfigError("either --data or --config is required");
}

// --------------------------------------------------------------- commands

int cmd_train(const CommonRunFlags& flags) {
  const dsa::RunConfig cfg = flags.load();
  const fs::path out = dsa::resolve_output(cfg.output);
  dsa::prepare_output_dir(out, flags.force);
  const auto result = dsa::train_runs(cfg, out, print_epoch);
  std::cout << dsa::summary_csv(result.summary);
  for (const auto& r : result.runs) {
    if (r.failure) std::cerr << "seed " << r.seed << " diverged: " << *r.failure << "\n";
  }
  std::cout << "artifacts: " << out.string() << "\n";
  return result.ok() ? kExitOk : kExitRuntime;
}

int cmd_ablation(const CommonRunFlags& flags, const std::string& variants) {
  CommonRunFlags f = flags;
  if (!variants.empty()) f.overrides.push_back("ablation.variants=" + variants);
  const dsa::RunConfig cfg = f.load();
  const fs::path out = dsa::resolve_output(cfg.output);
  dsa::prepare_output_dir(out, flags.force);
  const auto rows = dsa::run_ablation(cfg, out, print_epoch);
  std::cout << dsa::ablation_csv(rows);
  std::cout << "artifacts: " << out.string() << "\n";
  for (const auto& row : rows) {
    for (const auto& r : row.runs) {
      if (r.failure) return kExitRuntime;
    }
  }
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& config, const std::string& out_file, bool force) {
  auto loaded = dsa::load_checkpoint(checkpoint);
  const dsa::Dataset data = probe_dataset(data_dir, config, loaded.header.seed);
  dsa::TrainerOptions opts;
  if (!config.empty()) opts = dsa::RunConfig::load(config).trainer;
  const auto ev = dsa::evaluate_model(*loaded.model, data, opts);
  const std::string text = dsa::evaluation_json(ev);
  if (out_file.empty()) {
    std::cout << text;
  } else {
    const fs::path p = dsa::resolve_output(out_file);
    if (fs::exists(p) && !force) throw dsa::OutputExists(p.string() + " exists (use --force)");
    write_file(p, text);
  }
  return kExitOk;
}

int cmd_lemma(const dsa::LemmaParams& params, const std::string& out_file, bool force) {
  params.validate();
  const auto report = dsa::lemma_monte_carlo(params);
  const std::string text = dsa::lemma_report_json(report);
  if (out_file.empty()) {
    std::cout << text;
  } else {
    const fs::path p = dsa::resolve_output(out_file);
    if (fs::exists(p) && !force) throw dsa::OutputExists(p.string() + " exists (use --force)");
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file(p, text);
    std::cout << "report: " << p.string() << "\n";
  }
  return kExitOk;
}

int cmd_diagnostics(const std::string& checkpoint, const std::string& data_dir,
                    const std::string& config, std::string metrics,
                    const std::string& out_dir, int probe_batch, bool force) {
  // Everything that can fail on bad input happens before the output
  // directory is touched.
  auto loaded = dsa::load_checkpoint(checkpoint);
  const dsa::Dataset data = probe_dataset(data_dir, config, loaded.header.seed);
  if (metrics.empty()) {
    const fs::path sibling = fs::path(checkpoint).parent_path() / "metrics.jsonl";
    if (fs::exists(sibling)) metrics = sibling.string();
  }
  if (!metrics.empty()) dsa::read_metrics_log(metrics);
  const fs::path out = dsa::resolve_output(out_dir);
  dsa::prepare_output_dir(out, force);
  const auto result =
      dsa::run_diagnostics(*loaded.model, data.test, metrics, out, probe_batch);
  std::cout << "adapter grids: " << result.adapter_grids << "\n"
            << "similarity curve: " << (result.similarity_curve ? "yes" : "no") << "\n"
            << "mean head correlation: " << result.correlation.mean_off_diagonal() << "\n"
            << "artifacts: " << out.string() << "\n";
  return kExitOk;
}

struct MakeDataFlags {
  std::string task = "classification";
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  bool force = false;
  std::optional<int> classes, keypoints, image_size, channels, labeled, unlabeled, test;
  std::optional<double> separability;
};

int cmd_make_data(const MakeDataFlags& f) {
  dsa::Dataset data;
  if (!f.config.empty()) {
    data = dsa::make_run_dataset(dsa::RunConfig::load(f.config), f.seed);
  } else if (dsa::parse_task(f.task) == dsa::TaskKind::kClassification) {
    dsa::SynthClassificationConfig c;
    if (f.classes) c.classes = *f.classes;
    if (f.image_size) c.image_size = *f.image_size;
    if (f.channels) c.channels = *f.channels;
    if (f.labeled) c.labeled = *f.labeled;
    if (f.unlabeled) c.unlabeled = *f.unlabeled;
    if (f.test) c.test = *f.test;
    if (f.separability) c.separability = *f.separability;
    data = dsa::synth_classification(c, f.seed);
  } else {
    dsa::SynthKeypointConfig c;
    if (f.keypoints) c.keypoints = *f.keypoints;
    if (f.image_size) c.image_size = *f.image_size;
    if (f.channels) c.channels = *f.channels;
    if (f.labeled) c.labeled = *f.labeled;
    if (f.unlabeled) c.unlabeled = *f.unlabeled;
    if (f.test) c.test = *f.test;
    data = dsa::synth_keypoints(c, f.seed);
  }
  const fs::path out = dsa::resolve_output(f.out);
  dsa::prepare_output_dir(out, f.force);
  dsa::write_dataset(data, out);
  std::cout << "dataset: " << out.string() << " (" << data.labeled.size() << " labeled, "
            << data.unlabeled.size() << " unlabeled, " << data.test.size() << " test)\n";
  return kExitOk;
}

int cmd_corrupt(const std::string& data_dir, const std::string& corruption, int severity,
                const std::vector<std::string>& splits, std::uint64_t seed,
                const std::string& out_dir, bool force) {
  const auto kind = dsa::parse_corruption(corruption);
  dsa::corruption_parameter(kind, severity);
  dsa::Dataset data = dsa::read_dataset(data_dir);
  for (const auto& s : splits) {
    dsa::Split* split = s == "labeled"     ? &data.labeled
                        : s == "unlabeled" ? &data.unlabeled
                        : s == "test"      ? &data.test
                                           : nullptr;
    if (split == nullptr) throw dsa::InputError("unknown split '" + s + "'");
    if (split->size() > 0) {
      split->images = dsa::corrupt_images(split->images, kind, severity,
                                          dsa::derive_seed(seed, "corrupt." + s));
    }
  }
  const fs::path out = dsa::resolve_output(out_dir);
  dsa::prepare_output_dir(out, force);
  dsa::write_dataset(data, out);
  std::cout << "corrupted (" << corruption << ", severity " << severity << ", parameter "
            << dsa::corruption_parameter(kind, severity) << "): " << out.string() << "\n";
  return kExitOk;
}

int cmd_noisify(const std::string& data_dir, double rate, std::uint64_t seed,
                const std::string& out_dir, bool force) {
  dsa::Dataset data = dsa::read_dataset(data_dir);
  if (data.manifest.task != dsa::TaskKind::kClassification) {
    throw dsa::InputError("label noise applies to classification datasets only");
  }
  const auto noisy =
      dsa::inject_label_noise(data.labeled.labels, data.manifest.classes, rate, seed);
  std::string flips = "id,original,noisy\n";
  for (std::size_t i = 0; i < noisy.labels.size(); ++i) {
    if (noisy.flipped[i]) {
      flips += std::to_string(i) + "," + std::to_string(data.labeled.labels[i]) + "," +
               std::to_string(noisy.labels[i]) + "\n";
    }
  }
  data.labeled.labels = noisy.labels;
  const fs::path out = dsa::resolve_output(out_dir);
  dsa::prepare_output_dir(out, force);
  dsa::write_dataset(data, out);
  write_file(out / "flips.csv", flips);
  std::cout << "flipped " << noisy.flips << " of " << noisy.labels.size()
            << " labels: " << out.string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-head ensemble experiments (shared/private channels, adapters)"};
  app.require_subcommand(1);

  CommonRunFlags train_flags;
  auto* train = app.add_subcommand("train", "Train every configured seed");
  train_flags.add(train);

  CommonRunFlags ablation_flags;
  std::string ablation_variants;
  auto* ablation = app.add_subcommand("ablation", "Compare variants on identical seeds");
  ablation_flags.add(ablation);
  ablation->add_option("--variants", ablation_variants,
                       "Comma-separated variants (shorthand for ablation.variants)");

  std::string eval_ckpt, eval_data, eval_config, eval_out;
  bool eval_force = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--data", eval_data, "Dataset directory");
  eval->add_option("--config", eval_config, "Config used to regenerate the dataset");
  eval->add_option("--out", eval_out, "Write the JSON report here instead of stdout");
  eval->add_flag("--force", eval_force);

  dsa::LemmaParams lemma;
  std::string lemma_out;
  bool lemma_force = false;
  auto* lemma_cmd = app.add_subcommand("lemma-check", "Monte-Carlo head-input correlations");
  lemma_cmd->add_option("--trials", lemma.trials)->capture_default_str();
  lemma_cmd->add_option("--delta-ratio", lemma.delta_ratio)->capture_default_str();
  lemma_cmd->add_option("--shared-channels", lemma.shared_channels)->capture_default_str();
  lemma_cmd->add_option("--private-channels", lemma.private_channels)->capture_default_str();
  lemma_cmd->add_option("--height", lemma.height)->capture_default_str();
  lemma_cmd->add_option("--width", lemma.width)->capture_default_str();
  lemma_cmd->add_option("--heads", lemma.heads)->capture_default_str();
  lemma_cmd->add_option("--seed", lemma.seed)->capture_default_str();
  lemma_cmd->add_option("--out", lemma_out, "Report file (JSON); stdout when omitted");
  lemma_cmd->add_flag("--force", lemma_force);

  std::string diag_ckpt, diag_data, diag_config, diag_metrics, diag_out;
  int diag_probe = 32;
  bool diag_force = false;
  auto* diag = app.add_subcommand("diagnostics", "Adapter maps, similarity curve, correlations");
  diag->add_option("--checkpoint", diag_ckpt)->required();
  diag->add_option("--data", diag_data, "Dataset directory for the probe batch");
  diag->add_option("--config", diag_config, "Config used to regenerate the probe data");
  diag->add_option("--metrics", diag_metrics,
                   "metrics.jsonl (defaults to the one next to the checkpoint)");
  diag->add_option("--out", diag_out)->required();
  diag->add_option("--probe-batch", diag_probe)->capture_default_str();
  diag->add_flag("--force", diag_force);

  MakeDataFlags make;
  auto* make_cmd = app.add_subcommand("make-data", "Generate a synthetic dataset");
  make_cmd->add_option("--task", make.task)->capture_default_str();
  make_cmd->add_option("--config", make.config, "Take data settings from a run config");
  make_cmd->add_option("--seed", make.seed)->capture_default_str();
  make_cmd->add_option("--out", make.out)->required();
  make_cmd->add_option("--classes", make.classes);
  make_cmd->add_option("--keypoints", make.keypoints);
  make_cmd->add_option("--image-size", make.image_size);
  make_cmd->add_option("--channels", make.channels);
  make_cmd->add_option("--labeled", make.labeled);
  make_cmd->add_option("--unlabeled", make.unlabeled);
  make_cmd->add_option("--test", make.test);
  make_cmd->add_option("--separability", make.separability);
  make_cmd->add_flag("--force", make.force);

  std::string cor_data, cor_kind, cor_out;
  int cor_severity = 1;
  std::uint64_t cor_seed = 0;
  std::vector<std::string> cor_splits = {"test"};
  bool cor_force = false;
  auto* cor = app.add_subcommand("corrupt", "Write a corrupted copy of a dataset");
  cor->add_option("--data", cor_data)->required();
  cor->add_option("--corruption", cor_kind,
                  "gaussian_noise, impulse_noise, motion_blur or contrast")
      ->required();
  cor->add_option("--severity", cor_severity)->capture_default_str();
  cor->add_option("--splits", cor_splits, "Splits to corrupt")->delimiter(',')
      ->capture_default_str();
  cor->add_option("--seed", cor_seed)->capture_default_str();
  cor->add_option("--out", cor_out)->required();
  cor->add_flag("--force", cor_force);

  std::string noise_data, noise_out;
  double noise_rate = 0.08;
  std::uint64_t noise_seed = 0;
  bool noise_force = false;
  auto* noise = app.add_subcommand("noisify", "Inject symmetric label noise");
  noise->add_option("--data", noise_data)->required();
  noise->add_option("--rate", noise_rate)->capture_default_str();
  noise->add_option("--seed", noise_seed)->capture_default_str();
  noise->add_option("--out", noise_out)->required();
  noise->add_flag("--force", noise_force);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*train) return cmd_train(train_flags);
    if (*ablation) return cmd_ablation(ablation_flags, ablation_variants);
    if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_config, eval_out, eval_force);
    if (*lemma_cmd) return cmd_lemma(lemma, lemma_out, lemma_force);
    if (*diag) {
      return cmd_diagnostics(diag_ckpt, diag_data, diag_config, diag_metrics, diag_out,
                             diag_probe, diag_force);
    }
    if (*make_cmd) return cmd_make_data(make);
    if (*cor) {
      return cmd_corrupt(cor_data, cor_kind, cor_severity, cor_splits, cor_seed, cor_out,
                         cor_force);
    }
    if (*noise) return cmd_noisify(noise_data, noise_rate, noise_seed, noise_out, noise_force);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}
