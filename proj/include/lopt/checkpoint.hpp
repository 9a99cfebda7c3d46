#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lopt/model.hpp"
#include "lopt/trainer.hpp"

namespace lopt {

/// Container layout, all integers little-endian:
///   "LPT1" | u32 version | u64 len, config JSON | u64 count | entries | u64 FNV-1a of all prior bytes
/// entry: u32 name len, name | u8 section | u8 dtype | u32 rank | u64 dims[rank] | raw data
/// Entries are sorted by name.
inline constexpr char kCheckpointMagic[4] = {'L', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointSection : std::uint8_t { kModel = 0, kAux = 1, kOptimizer = 2 };
enum class DType : std::uint8_t { kF32 = 1, kF64 = 2, kU64 = 3 };

struct CheckpointEntry {
  std::string name;
  CheckpointSection section = CheckpointSection::kModel;
  DType dtype = DType::kF32;
  std::vector<std::uint64_t> dims;
  std::vector<unsigned char> data;  // little-endian element bytes
};

struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::string config;  // JSON echo; its "model" object rebuilds the network
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

/// Inference skips the aux-head and optimizer sections while reading.
enum class LoadMode { kFull, kInference };

/// Writes to a sibling temporary file and renames it into place.
void write_checkpoint_file(const std::filesystem::path& path, CheckpointFile file);
/// Validates magic, version, checksum and every length before returning.
/// Any problem is a FormatError and nothing is returned.
CheckpointFile read_checkpoint_file(const std::filesystem::path& path, LoadMode mode = LoadMode::kFull);

/// Model, local heads and optimizer state of a trainer. config_echo must be
/// a JSON object with a "model" entry.
template <typename Real>
void save_checkpoint(const std::filesystem::path& path, const Trainer<Real>& trainer, const std::string& config_echo);

/// Model parameters only.
template <typename Real>
void save_model_checkpoint(const std::filesystem::path& path, const Transformer<Real>& model,
                           const std::string& config_echo);

/// Rebuilds the network from a checkpoint, ignoring aux and optimizer data.
template <typename Real>
Transformer<Real> load_model(const std::filesystem::path& path, LoadMode mode = LoadMode::kInference);

/// Restores every tensor and step counter of a trainer built from the same
/// configuration. Validation happens before anything is written.
template <typename Real>
void load_checkpoint(const std::filesystem::path& path, Trainer<Real>& trainer);

}  // namespace lopt
