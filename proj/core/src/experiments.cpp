#include "dsa/experiments.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

namespace dsa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + file.string());
}

std::string seed_dir(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

}  // namespace

fs::path resolve_output(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') {
    return fs::path(root) / p;
  }
  return p;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) {
      throw OutputExists("output path " + dir.string() + " exists and is not a directory");
    }
    if (!fs::is_empty(dir)) {
      if (!force) {
        throw OutputExists("output directory " + dir.string() +
                           " is not empty (use --force to overwrite)");
      }
      for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
    }
  }
  fs::create_directories(dir);
}

// ------------------------------------------------------------------ runs

SeedRun run_seed(const RunConfig& cfg, Variant variant, std::uint64_t seed,
                 const fs::path& dir, const EpochCallback& on_epoch) {
  const Dataset data = make_run_dataset(cfg, seed);
  const NoisyLabels labels = make_run_labels(cfg, data, seed);
  EnsembleModel model(cfg.model_spec(variant), seed);
  Trainer trainer(model, data, cfg.trainer, seed, labels.labels);

  SeedRun run;
  run.variant = variant;
  run.seed = seed;
  std::ofstream log;
  if (!dir.empty()) {
    fs::create_directories(dir);
    log.open(dir / "metrics.jsonl");
    if (!log) throw std::runtime_error("cannot write " + (dir / "metrics.jsonl").string());
  }
  StreamHash combined;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    MetricsRecord rec;
    try {
      rec = trainer.train_epoch(epoch);
    } catch (const TrainingDiverged& e) {
      run.failure = "epoch " + std::to_string(epoch) + ": " + e.what();
      break;
    }
    combined.update_values(&rec.stream_checksum, 1);
    if (log.is_open()) log << rec.to_json() << "\n" << std::flush;
    run.history.push_back(std::move(rec));
    if (on_epoch) on_epoch(variant, run.history.back());
  }
  run.stream_checksum = combined.value();
  if (!dir.empty()) {
    if (run.failure) {
      write_text(dir / "failure.json",
                 json{{"status", "diverged"}, {"detail", *run.failure}}.dump() + "\n");
    } else {
      save_checkpoint(dir / "checkpoint.bin", model, cfg.epochs - 1, seed);
    }
  }
  return run;
}

std::vector<MetricSummary> summarize_final(std::span<const SeedRun> runs) {
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : runs) {
    if (r.failure || r.history.empty()) continue;
    for (const auto& [k, v] : r.history.back().scalars()) values[k].push_back(v);
  }
  return aggregate_values(values);
}

bool TrainResult::ok() const {
  for (const auto& r : runs) {
    if (r.failure) return false;
  }
  return true;
}

TrainResult train_runs(const RunConfig& cfg, const fs::path& out,
                       const EpochCallback& on_epoch) {
  cfg.write(out / "config.ini");
  TrainResult result;
  for (std::uint64_t seed : cfg.seeds) {
    result.runs.push_back(run_seed(cfg, cfg.variant, seed, out / seed_dir(seed), on_epoch));
  }
  result.summary = summarize_final(result.runs);
  write_text(out / "summary.csv", summary_csv(result.summary));
  return result;
}

std::vector<AblationRow> run_ablation(const RunConfig& cfg, const fs::path& out,
                                      const EpochCallback& on_epoch) {
  std::vector<Variant> variants = cfg.ablation_variants;
  if (variants.empty()) variants.push_back(cfg.variant);
  cfg.write(out / "config.ini");
  std::vector<AblationRow> rows;
  for (Variant v : variants) {
    AblationRow row;
    row.variant = v;
    for (std::uint64_t seed : cfg.seeds) {
      row.runs.push_back(run_seed(cfg, v, seed,
                                  out / std::string(variant_id(v)) / seed_dir(seed),
                                  on_epoch));
    }
    row.summary = summarize_final(row.runs);
    rows.push_back(std::move(row));
  }
  write_text(out / "ablation.csv", ablation_csv(rows));
  return rows;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::set<std::string> metrics;
  for (const auto& r : rows) {
    for (const auto& s : r.summary) metrics.insert(s.metric);
  }
  std::ostringstream os;
  os << std::setprecision(10);
  os << "variant,seeds,failed";
  for (const auto& m : metrics) os << "," << m << "_mean," << m << "_std";
  os << ",stream_checksums\n";
  for (const auto& r : rows) {
    int failed = 0;
    for (const auto& run : r.runs) failed += run.failure ? 1 : 0;
    os << variant_id(r.variant) << "," << r.runs.size() << "," << failed;
    for (const auto& m : metrics) {
      const MetricSummary* found = nullptr;
      for (const auto& s : r.summary) {
        if (s.metric == m) found = &s;
      }
      os << ",";
      if (found) os << found->mean;
      os << ",";
      if (found && found->stddev) os << *found->stddev;
    }
    os << ",";
    for (std::size_t i = 0; i < r.runs.size(); ++i) {
      if (i > 0) os << ";";
      os << hex64(r.runs[i].stream_checksum);
    }
    os << "\n";
  }
  return os.str();
}

// --------------------------------------------------------------- reports

std::string lemma_report_json(const LemmaReport& r) {
  const json j = {
      {"trials", r.trials},
      {"resampled", r.resampled},
      {"mean_c_dsa", r.mean_c_dsa},
      {"mean_c_cbe", r.mean_c_cbe},
      {"mean_c_sdoas", r.mean_c_sdoas},
      {"fraction_dsa_le_cbe", r.fraction_lemma1},
      {"fraction_dsa_le_sdoas", r.fraction_lemma2},
      {"margin_cbe", r.mean_c_cbe - r.mean_c_dsa},
      {"margin_sdoas", r.mean_c_sdoas - r.mean_c_dsa},
      {"dsa_below_cbe", r.mean_c_dsa <= r.mean_c_cbe},
      {"dsa_below_sdoas", r.mean_c_dsa <= r.mean_c_sdoas},
      {"generator",
       {{"distribution", "iid_standard_normal"},
        {"shared_channels", r.params.shared_channels},
        {"private_channels", r.params.private_channels},
        {"height", r.params.height},
        {"width", r.params.width},
        {"heads", r.params.heads},
        {"delta_ratio", r.params.delta_ratio},
        {"seed", r.params.seed}}},
  };
  return j.dump(2) + "\n";
}

Evaluation evaluate_model(EnsembleModel& model, const Dataset& data,
                          const TrainerOptions& options) {
  TrainerOptions opts = options;
  opts.supervised_only = true;
  Trainer trainer(model, data, opts, 0);
  return trainer.evaluate(data.test);
}

std::string evaluation_json(const Evaluation& ev) {
  json j;
  if (ev.error_rate) j["error_rate"] = *ev.error_rate;
  if (!ev.head_error_rates.empty()) j["head_error_rates"] = ev.head_error_rates;
  if (ev.mean_head_error) j["mean_head_error"] = *ev.mean_head_error;
  if (ev.mse) j["mse"] = *ev.mse;
  if (!ev.pck.empty()) {
    json p = json::object();
    for (const auto& [t, v] : ev.pck) {
      std::ostringstream key;
      key << t;
      p[key.str()] = v;
    }
    j["pck"] = p;
  }
  j["agreement"] = ev.agreement;
  j["cosine"] = ev.cosine;
  j["head_correlation"] = ev.head_correlation;
  return j.dump(2) + "\n";
}

std::vector<MetricsRecord> read_metrics_log(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw InputError("cannot open metrics log " + file.string());
  std::vector<MetricsRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json(line));
    } catch (const std::exception& e) {
      throw InputError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ----------------------------------------------------------- diagnostics

Tensor feature_grid(const Tensor& map) {
  if (map.n() != 1 || map.c() < 1) throw InputError("feature_grid expects (1, C, h, w)");
  const int C = map.c(), h = map.h(), w = map.w();
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(C))));
  const int rows = (C + cols - 1) / cols;
  Tensor out({1, 1, rows * (h + 1) - 1, cols * (w + 1) - 1});
  for (int c = 0; c < C; ++c) {
    const double* p = map.data() + map.index(0, c, 0, 0);
    const auto [lo, hi] = std::minmax_element(p, p + static_cast<std::size_t>(h) * w);
    const double range = *hi - *lo;
    const int oy = (c / cols) * (h + 1), ox = (c % cols) * (w + 1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        out.at(0, 0, oy + y, ox + x) = range > 0.0 ? (p[y * w + x] - *lo) / range : 0.0;
      }
    }
  }
  return out;
}

std::string similarity_curve_csv(std::span<const MetricsRecord> history) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "epoch,agreement,cosine,head_correlation,error_rate\n";
  for (const auto& r : history) {
    os << r.epoch << "," << r.agreement << "," << r.cosine << "," << r.head_correlation << ",";
    if (r.error_rate) os << *r.error_rate;
    os << "\n";
  }
  return os.str();
}

std::string correlation_matrix_csv(const CorrelationMatrix& m) {
  std::ostringstream os;
  os << std::setprecision(12);
  os << "head";
  for (int j = 0; j < m.size(); ++j) os << "," << j + 1;
  os << "\n";
  for (int i = 0; i < m.size(); ++i) {
    os << i + 1;
    for (int j = 0; j < m.size(); ++j) os << "," << m.at(i, j);
    os << "\n";
  }
  return os.str();
}

DiagnosticsResult run_diagnostics(EnsembleModel& model, const Split& probe,
                                  const fs::path& metrics_log, const fs::path& out,
                                  int probe_batch) {
  if (probe.size() < 1) throw InputError("diagnostics need a non-empty probe split");
  const int n = std::min(std::max(1, probe_batch), probe.size());
  const auto trace = model.forward(probe.images.slice_batch(0, n), false);

  DiagnosticsResult result;
  for (int m = 0; m < model.adapter_count(); ++m) {
    write_pnm(feature_grid(trace.deltas[m].slice_batch(0, 1)),
              out / ("adapter_" + std::to_string(m + 1) + ".pgm"));
    ++result.adapter_grids;
  }
  if (model.heads() >= 2) {
    result.correlation = mean_pairwise_head_correlation(trace.head_inputs);
  } else {
    result.correlation.set(0, 0, {1.0, false});
  }
  write_text(out / "correlation.csv", correlation_matrix_csv(result.correlation));
  if (!metrics_log.empty()) {
    const auto history = read_metrics_log(metrics_log);
    write_text(out / "similarity.csv", similarity_curve_csv(history));
    result.similarity_curve = true;
  }
  return result;
}

}  // namespace dsa
