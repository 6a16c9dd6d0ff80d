#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dsa/checkpoint.hpp"
#include "dsa/decorrelation.hpp"
#include "dsa/metrics.hpp"
#include "dsa/run_config.hpp"
#include "dsa/ssl_engine.hpp"

namespace dsa {

/// Environment variable that anchors relative output paths.
inline constexpr const char* kOutputRootEnv = "DSA_OUTPUT_ROOT";

/// Relative paths are resolved against $DSA_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output(const std::filesystem::path& p);

/// Raised when an artifact directory already has content.
class OutputExists : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Creates `dir`; refuses a non-empty one unless `force` (which clears it).
void prepare_output_dir(const std::filesystem::path& dir, bool force);

using EpochCallback = std::function<void(Variant, const MetricsRecord&)>;

struct SeedRun {
  Variant variant = Variant::kDsa;
  std::uint64_t seed = 0;
  std::vector<MetricsRecord> history;
  std::optional<std::string> failure;  // set when training diverged
  /// Hash over every epoch's data-stream checksum.
  std::uint64_t stream_checksum = 0;
};

/// Trains one variant for one seed. When `dir` is non-empty, writes
/// metrics.jsonl (one record per epoch) and checkpoint.bin into it.
SeedRun run_seed(const RunConfig& cfg, Variant variant, std::uint64_t seed,
                 const std::filesystem::path& dir, const EpochCallback& on_epoch = {});

/// Mean and sample std of the final-epoch metrics of successful runs.
std::vector<MetricSummary> summarize_final(std::span<const SeedRun> runs);

struct TrainResult {
  std::vector<SeedRun> runs;
  std::vector<MetricSummary> summary;
  bool ok() const;
};

/// Writes config.ini, seed_<s>/{metrics.jsonl,checkpoint.bin} and
/// summary.csv under `out` (which must already be prepared).
TrainResult train_runs(const RunConfig& cfg, const std::filesystem::path& out,
                       const EpochCallback& on_epoch = {});

struct AblationRow {
  Variant variant = Variant::kDsa;
  std::vector<SeedRun> runs;
  std::vector<MetricSummary> summary;
};

/// Runs every configured variant (or just cfg.variant) on identical seeds.
/// Writes <variant>/seed_<s>/... plus ablation.csv under `out`.
std::vector<AblationRow> run_ablation(const RunConfig& cfg,
                                      const std::filesystem::path& out,
                                      const EpochCallback& on_epoch = {});

/// Side-by-side table: one row per variant, mean and std per metric, and
/// the per-seed stream checksums.
std::string ablation_csv(std::span<const AblationRow> rows);

std::string lemma_report_json(const LemmaReport& report);

Evaluation evaluate_model(EnsembleModel& model, const Dataset& data,
                          const TrainerOptions& options);
std::string evaluation_json(const Evaluation& ev);

std::vector<MetricsRecord> read_metrics_log(const std::filesystem::path& file);

/// (1, C, h, w) feature map tiled into a single-channel grid image, each
/// channel min-max normalised to [0, 1], with a 1-pixel separator.
Tensor feature_grid(const Tensor& map);

/// epoch,agreement,cosine,head_correlation,error_rate
std::string similarity_curve_csv(std::span<const MetricsRecord> history);

std::string correlation_matrix_csv(const CorrelationMatrix& m);

struct DiagnosticsResult {
  int adapter_grids = 0;
  bool similarity_curve = false;
  CorrelationMatrix correlation{1};
};

/// Writes adapter_<m>.pgm grids (adapter variants only), similarity.csv
/// (when a metrics log is given) and correlation.csv for the probe batch.
DiagnosticsResult run_diagnostics(EnsembleModel& model, const Split& probe,
                                  const std::filesystem::path& metrics_log,
                                  const std::filesystem::path& out,
                                  int probe_batch = 32);

}  // namespace dsa
