#pragma once

#include <filesystem>
#include <string>

#include "sdclip/config.hpp"
#include "sdclip/model.hpp"

namespace sdclip {

inline constexpr int kCheckpointFormatVersion = 1;

/// A checkpoint directory holds
///   manifest.json  format_version, config snapshot, step, per-tensor
///                  {name, shape, offset, count}, byte length and CRC-32 of
///                  weights.bin
///   weights.bin    little-endian float32 tensors concatenated in manifest order
/// Tensors cover every encoder (online, teachers), log τ, the EMA center and
/// the optimizer moments, so a resumed run continues bit-exactly.
void save_checkpoint(const std::filesystem::path& dir, const TrainConfig& config,
                     const ModelState& state);

struct LoadedCheckpoint {
  TrainConfig config;
  ModelState state;
  std::string id;  // CRC-32 of weights.bin, hex
};

/// Throws CheckpointError on a missing file, format-version mismatch, short
/// or oversized weights.bin, or checksum mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace sdclip
