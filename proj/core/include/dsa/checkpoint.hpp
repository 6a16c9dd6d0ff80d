#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "dsa/ensemble_heads.hpp"

namespace dsa {

// Layout (little-endian):
//   8 bytes   magic "DSACKPT\0"
//   u32       format version
//   u64       header length L
//   L bytes   JSON header: model spec, epoch, seed, parameter table
//   payload   parameter values as raw IEEE-754 doubles, table order
//   u64       FNV-1a of everything before it

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Raised for unreadable, truncated or inconsistent checkpoint files.
class CheckpointError : public InputError {
 public:
  using InputError::InputError;
};

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  ModelSpec spec;
  int epoch = 0;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& file, EnsembleModel& model,
                     int epoch, std::uint64_t seed);

struct LoadedCheckpoint {
  CheckpointHeader header;
  std::unique_ptr<EnsembleModel> model;
};

/// Validates the whole file (magic, version, checksum, parameter table)
/// before building the model.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& file);

std::string model_spec_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

}  // namespace dsa
