#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "advpnml/models.hpp"

namespace advpnml {

class CheckpointVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CheckpointSpecError : public ConsistencyError {
 public:
  using ConsistencyError::ConsistencyError;
};

/// Binary container layout (all integers little-endian):
///
///   8 bytes   magic "APNMLCKP"
///   u32       format version (kCheckpointVersion)
///   u32       header length L, then L bytes of JSON text
///   u32       record count R
///   R times:  u32 name length, name bytes, u32 rank, rank x u32 extents,
///             product(extents) x float32 values
///
/// The JSON header carries "kind", the model descriptor (for checkpoints)
/// and free-form metadata.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorArchive {
  std::string kind;           // "checkpoint" or "tensors"
  std::string spec;           // model descriptor; empty for plain tensor sets
  std::string metadata_json;  // JSON object text, "{}" when empty
  std::vector<std::pair<std::string, Tensor<float>>> records;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

struct TrainingMetadata {
  int epochs = 0;
  std::uint64_t seed = 0;
  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct Checkpoint {
  ModelParams<float> params;
  TrainingMetadata meta;
};

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path,
                     const TrainingMetadata& meta = {});

/// Validates format version and parameter layout; when `expected` is given the
/// stored spec must equal it.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelSpec>& expected = {});

}  // namespace advpnml
