#pragma once

// Versioned binary checkpoint: header, config and meta as key-value text,
// named float32 tensors, trailing checksum.

#include "moon/encoder.hpp"
#include "moon/kv_config.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace moon {

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string config_hash;
  std::int64_t step = 0;
  int format_version = kCheckpointVersion;
  std::map<std::string, double> metrics;
};

struct NamedTensor {
  std::string name;
  MatrixF value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct Checkpoint {
  KvConfig config;
  CheckpointMeta meta;
  std::vector<NamedTensor> parameters;
};

/// FNV-1a hash of the canonical config text.
std::string config_hash(const KvConfig& config);

void save_checkpoint(const std::filesystem::path& path, const ParameterStore<float>& params, const KvConfig& config,
                     CheckpointMeta meta);

/// Throws ParseError on truncation or corruption, IntegrityError when the
/// stored config hash does not match the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// As above, then checks every key of `expected` that starts with one of the
/// prefixes against the stored config; IntegrityError names the first differing key.
Checkpoint load_checkpoint(const std::filesystem::path& path, const KvConfig& expected,
                           const std::vector<std::string>& prefixes = {"encoder.", "moe."});

/// Copies tensors into an encoder; names and shapes must match exactly.
void apply_checkpoint(const Checkpoint& ckpt, Encoder<float>& encoder);

/// Builds an encoder from the stored encoder config and loads its parameters.
Encoder<float> encoder_from_checkpoint(const Checkpoint& ckpt);

}  // namespace moon
