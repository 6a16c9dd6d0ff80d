#include "dsa/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <vector>

namespace dsa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'D', 'S', 'A', 'C', 'K', 'P', 'T', '\0'};

json spec_to_json(const ModelSpec& s) {
  json adapters = json::array();
  for (const auto& a : s.ensemble.adapters) {
    adapters.push_back({{"index", a.index},
                        {"hidden_channels", a.hidden_channels},
                        {"activation", std::string(nn::activation_id(a.activation))}});
  }
  return {
      {"task", std::string(task_id(s.task))},
      {"outputs", s.outputs},
      {"head_hidden", s.head_hidden},
      {"zero_init_adapters", s.zero_init_adapters},
      {"backbone",
       {{"in_channels", s.backbone.in_channels},
        {"width", s.backbone.width},
        {"feature_channels", s.backbone.feature_channels},
        {"pool_stages", s.backbone.pool_stages}}},
      {"ensemble",
       {{"variant", std::string(variant_id(s.ensemble.variant))},
        {"heads", s.ensemble.heads},
        {"feature_channels", s.ensemble.feature_channels},
        {"private_channels", s.ensemble.private_channels},
        {"adapters", adapters}}},
  };
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.task = parse_task(j.at("task").get<std::string>());
  s.outputs = j.at("outputs").get<int>();
  s.head_hidden = j.at("head_hidden").get<int>();
  s.zero_init_adapters = j.at("zero_init_adapters").get<bool>();
  const auto& b = j.at("backbone");
  s.backbone.in_channels = b.at("in_channels").get<int>();
  s.backbone.width = b.at("width").get<int>();
  s.backbone.feature_channels = b.at("feature_channels").get<int>();
  s.backbone.pool_stages = b.at("pool_stages").get<int>();
  const auto& e = j.at("ensemble");
  s.ensemble.variant = parse_variant(e.at("variant").get<std::string>());
  s.ensemble.heads = e.at("heads").get<int>();
  s.ensemble.feature_channels = e.at("feature_channels").get<int>();
  s.ensemble.private_channels = e.at("private_channels").get<int>();
  for (const auto& a : e.at("adapters")) {
    s.ensemble.adapters.push_back(
        {a.at("index").get<int>(), a.at("hidden_channels").get<int>(),
         nn::parse_activation(a.at("activation").get<std::string>())});
  }
  s.validate();
  return s;
}

template <typename T>
void put(std::vector<char>& buf, const T& v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

std::uint64_t checksum(const char* data, std::size_t n) {
  StreamHash h;
  h.update(data, n);
  return h.value();
}

}  // namespace

std::string model_spec_json(const ModelSpec& spec) { return spec_to_json(spec).dump(); }

ModelSpec model_spec_from_json(const std::string& text) {
  return spec_from_json(json::parse(text));
}

void save_checkpoint(const fs::path& file, EnsembleModel& model, int epoch,
                     std::uint64_t seed) {
  json params = json::array();
  for (auto* p : model.parameters()) params.push_back({{"name", p->name}, {"size", p->size()}});
  const json header = {{"spec", spec_to_json(model.spec())},
                       {"epoch", epoch},
                       {"seed", seed},
                       {"parameters", params}};
  const std::string text = header.dump();

  std::vector<char> buf(kMagic, kMagic + sizeof kMagic);
  put(buf, kCheckpointVersion);
  put(buf, static_cast<std::uint64_t>(text.size()));
  buf.insert(buf.end(), text.begin(), text.end());
  for (auto* p : model.parameters()) {
    const auto* bytes = reinterpret_cast<const char*>(p->value.data());
    buf.insert(buf.end(), bytes, bytes + p->size() * sizeof(double));
  }
  put(buf, checksum(buf.data(), buf.size()));

  // Write to a sibling and rename so a crash never leaves a torn file.
  const fs::path tmp = file.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, file);
}

LoadedCheckpoint load_checkpoint(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + file.string());
  const std::vector<char> buf((std::istreambuf_iterator<char>(is)),
                              std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + file.string() + ": ";
  constexpr std::size_t kFixed = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (buf.size() < kFixed + sizeof(std::uint64_t) ||
      std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(where + "bad magic, not a checkpoint");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, buf.data() + sizeof kMagic, sizeof version);
  if (version != kCheckpointVersion) {
    throw CheckpointError(where + "unsupported format version " + std::to_string(version));
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - sizeof stored, sizeof stored);
  if (checksum(buf.data(), buf.size() - sizeof stored) != stored) {
    throw CheckpointError(where + "checksum mismatch (file is corrupted)");
  }
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, buf.data() + sizeof kMagic + sizeof version, sizeof header_len);
  if (header_len > buf.size() - kFixed - sizeof stored) {
    throw CheckpointError(where + "header length out of range");
  }

  LoadedCheckpoint out;
  json header;
  try {
    header = json::parse(buf.begin() + kFixed, buf.begin() + kFixed + header_len);
    out.header.version = version;
    out.header.spec = spec_from_json(header.at("spec"));
    out.header.epoch = header.at("epoch").get<int>();
    out.header.seed = header.at("seed").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(where + "malformed header: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(where + "invalid model spec: " + e.what());
  }

  out.model = std::make_unique<EnsembleModel>(out.header.spec, out.header.seed);
  const auto params = out.model->parameters();
  const auto& table = header.at("parameters");
  if (table.size() != params.size()) throw CheckpointError(where + "parameter table mismatch");
  std::size_t offset = kFixed + header_len;
  const std::size_t end = buf.size() - sizeof stored;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (table[i].at("name").get<std::string>() != params[i]->name ||
        table[i].at("size").get<std::size_t>() != params[i]->size()) {
      throw CheckpointError(where + "parameter '" + params[i]->name + "' does not match");
    }
    const std::size_t bytes = params[i]->size() * sizeof(double);
    if (offset + bytes > end) throw CheckpointError(where + "truncated payload");
    std::memcpy(params[i]->value.data(), buf.data() + offset, bytes);
    offset += bytes;
  }
  if (offset != end) throw CheckpointError(where + "trailing bytes in payload");
  return out;
}

}  // namespace dsa
