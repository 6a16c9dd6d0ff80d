#include "dsa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

namespace dsa {

using nlohmann::json;

KeypointSet KeypointSet::gather(std::span<const int> indices) const {
  KeypointSet out(static_cast<int>(indices.size()), keypoints);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    for (int k = 0; k < keypoints; ++k) {
      out.x(static_cast<int>(i), k) = x(indices[i], k);
      out.y(static_cast<int>(i), k) = y(indices[i], k);
    }
  }
  return out;
}

void PckSpec::validate(int keypoints) const {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw ConfigError("PCK threshold must lie in (0, 1]");
  }
  if (pair_a == pair_b || pair_a < 0 || pair_b < 0 || pair_a >= keypoints ||
      pair_b >= keypoints) {
    throw ConfigError("PCK normalization pair must be two distinct valid keypoints");
  }
}

double error_rate(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw InputError("error_rate: need equal, non-empty prediction/label lists");
  }
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    wrong += predictions[i] != labels[i] ? 1 : 0;
  }
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

namespace {

void check_same_layout(const KeypointSet& a, const KeypointSet& b) {
  if (a.images != b.images || a.keypoints != b.keypoints || a.images < 1 ||
      a.keypoints < 1 || a.xy.size() != b.xy.size()) {
    throw InputError("keypoint sets must share a non-empty (I, K, 2) shape");
  }
}

}  // namespace

double keypoint_mse(const KeypointSet& pred, const KeypointSet& gt) {
  check_same_layout(pred, gt);
  double total = 0.0;
  for (int i = 0; i < gt.images; ++i) {
    double per_image = 0.0;
    for (int k = 0; k < gt.keypoints; ++k) {
      per_image += std::hypot(pred.x(i, k) - gt.x(i, k), pred.y(i, k) - gt.y(i, k));
    }
    total += per_image / gt.keypoints;
  }
  return total / gt.images;
}

PckResult pck(const KeypointSet& pred, const KeypointSet& gt, const PckSpec& spec) {
  check_same_layout(pred, gt);
  spec.validate(gt.keypoints);
  PckResult out;
  std::size_t hits = 0, total = 0;
  for (int i = 0; i < gt.images; ++i) {
    const double l = std::hypot(gt.x(i, spec.pair_a) - gt.x(i, spec.pair_b),
                                gt.y(i, spec.pair_a) - gt.y(i, spec.pair_b));
    if (l <= 0.0) {
      ++out.excluded_images;
      continue;
    }
    for (int k = 0; k < gt.keypoints; ++k) {
      const double d =
          std::hypot(pred.x(i, k) - gt.x(i, k), pred.y(i, k) - gt.y(i, k));
      hits += d / l <= spec.threshold ? 1 : 0;
      ++total;
    }
  }
  out.value = total > 0 ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
  return out;
}

KeypointSet decode_heatmaps(const Tensor& heatmaps, int stride) {
  KeypointSet out(heatmaps.n(), heatmaps.c());
  const int H = heatmaps.h(), W = heatmaps.w();
  for (int n = 0; n < heatmaps.n(); ++n) {
    for (int k = 0; k < heatmaps.c(); ++k) {
      const double* p = heatmaps.data() + heatmaps.index(n, k, 0, 0);
      const int best = static_cast<int>(std::max_element(p, p + H * W) - p);
      const int by = best / W, bx = best % W;
      double x = bx, y = by;
      if (bx > 0 && bx < W - 1) {
        const double d = p[by * W + bx + 1] - p[by * W + bx - 1];
        x += d > 0 ? 0.25 : (d < 0 ? -0.25 : 0.0);
      }
      if (by > 0 && by < H - 1) {
        const double d = p[(by + 1) * W + bx] - p[(by - 1) * W + bx];
        y += d > 0 ? 0.25 : (d < 0 ? -0.25 : 0.0);
      }
      out.x(n, k) = heatmap_to_image(x, stride);
      out.y(n, k) = heatmap_to_image(y, stride);
    }
  }
  return out;
}

// -------------------------------------------------------- MetricsRecord

namespace {

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string pck_key(double t) {
  std::ostringstream os;
  os << "pck@" << t;
  return os.str();
}

MetricsRecord parse_record(const json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.loss_supervised = j.at("loss_supervised").get<double>();
  r.loss_ensemble = j.at("loss_ensemble").get<double>();
  r.loss_lb = j.at("loss_lb").get<double>();
  r.loss_total = j.at("loss_total").get<double>();
  r.mask_rate = j.at("mask_rate").get<double>();
  if (j.contains("pseudo_label_accuracy")) {
    r.pseudo_label_accuracy = j["pseudo_label_accuracy"].get<double>();
  }
  if (j.contains("error_rate")) r.error_rate = j["error_rate"].get<double>();
  if (j.contains("head_error_rates")) {
    r.head_error_rates = j["head_error_rates"].get<std::vector<double>>();
  }
  if (j.contains("mean_head_error")) r.mean_head_error = j["mean_head_error"].get<double>();
  if (j.contains("mse")) r.mse = j["mse"].get<double>();
  if (j.contains("pck")) {
    for (const auto& [k, v] : j["pck"].items()) r.pck[std::stod(k)] = v.get<double>();
  }
  r.head_correlation = j.at("head_correlation").get<double>();
  r.agreement = j.at("agreement").get<double>();
  r.cosine = j.at("cosine").get<double>();
  r.stream_checksum =
      std::stoull(j.at("stream_checksum").get<std::string>(), nullptr, 16);
  r.seconds = j.value("seconds", 0.0);
  return r;
}

}  // namespace

std::string MetricsRecord::to_json() const {
  json j;
  j["epoch"] = epoch;
  j["seed"] = seed;
  j["loss_supervised"] = loss_supervised;
  j["loss_ensemble"] = loss_ensemble;
  j["loss_lb"] = loss_lb;
  j["loss_total"] = loss_total;
  j["mask_rate"] = mask_rate;
  if (pseudo_label_accuracy) j["pseudo_label_accuracy"] = *pseudo_label_accuracy;
  if (error_rate) j["error_rate"] = *error_rate;
  if (!head_error_rates.empty()) j["head_error_rates"] = head_error_rates;
  if (mean_head_error) j["mean_head_error"] = *mean_head_error;
  if (mse) j["mse"] = *mse;
  if (!pck.empty()) {
    json p = json::object();
    for (const auto& [t, v] : pck) p[pck_key(t).substr(4)] = v;
    j["pck"] = p;
  }
  j["head_correlation"] = head_correlation;
  j["agreement"] = agreement;
  j["cosine"] = cosine;
  j["stream_checksum"] = hex64(stream_checksum);
  j["seconds"] = seconds;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  try {
    return parse_record(json::parse(line));
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed metrics record: ") + e.what());
  } catch (const std::logic_error& e) {
    throw InputError(std::string("malformed metrics record: ") + e.what());
  }
}

std::map<std::string, double> MetricsRecord::scalars() const {
  std::map<std::string, double> m;
  m["loss_supervised"] = loss_supervised;
  m["loss_ensemble"] = loss_ensemble;
  m["loss_lb"] = loss_lb;
  m["loss_total"] = loss_total;
  m["mask_rate"] = mask_rate;
  if (pseudo_label_accuracy) m["pseudo_label_accuracy"] = *pseudo_label_accuracy;
  if (error_rate) m["error_rate"] = *error_rate;
  if (mean_head_error) m["mean_head_error"] = *mean_head_error;
  if (mse) m["mse"] = *mse;
  for (const auto& [t, v] : pck) m[pck_key(t)] = v;
  m["head_correlation"] = head_correlation;
  m["agreement"] = agreement;
  m["cosine"] = cosine;
  return m;
}

std::vector<MetricSummary> aggregate_values(
    const std::map<std::string, std::vector<double>>& values) {
  std::vector<MetricSummary> out;
  for (const auto& [name, v] : values) {
    if (v.empty()) continue;
    MetricSummary s;
    s.metric = name;
    s.seeds = static_cast<int>(v.size());
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() >= 2) {
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.stddev = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

std::vector<MetricSummary> aggregate_runs(std::span<const MetricsRecord> records) {
  if (records.empty()) throw InputError("aggregate_runs: no records");
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : records) {
    for (const auto& [k, v] : r.scalars()) values[k].push_back(v);
  }
  return aggregate_values(values);
}

std::string summary_csv(std::span<const MetricSummary> rows) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "metric,mean,std,seeds\n";
  for (const auto& r : rows) {
    os << r.metric << "," << r.mean << ",";
    if (r.stddev) os << *r.stddev;
    os << "," << r.seeds << "\n";
  }
  return os.str();
}

}  // namespace dsa
