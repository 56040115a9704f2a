#pragma once

// Model checkpoints.
//
//   "ETSV" | u32 version | u64 header length | JSON header | payload | u64 checksum
//
// The header records the encoder configuration, model kind, output count,
// head layout, the time grid (isd), the training history and, for every
// parameter and buffer block, its name, shape, frozen flag and byte offset.
// The payload is the blocks' little-endian 64-bit floats in header order. The
// checksum is FNV-1a over every preceding byte.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "ets/model/ecg_model.hpp"
#include "ets/train/train.hpp"
#include "json.hpp"

namespace ets::train {

inline constexpr std::uint32_t kCheckpointVersion = 2;

enum class CheckpointErrorKind {
  io,
  bad_magic,
  version_mismatch,
  truncated,
  malformed_header,
  shape_mismatch,
  checksum_mismatch
};

std::string to_string(CheckpointErrorKind kind);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(to_string(kind) + ": " + what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct Checkpoint {
  model::EcgModel model;
  History history;
};

std::string encode_checkpoint(model::EcgModel& model, const History& history);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(model::EcgModel& model, const History& history, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json encoder_config_to_json(const model::EncoderConfig& config);
model::EncoderConfig encoder_config_from_json(const nlohmann::json& doc);
nlohmann::json history_to_json(const History& history);
History history_from_json(const nlohmann::json& doc);

}  // namespace ets::train
