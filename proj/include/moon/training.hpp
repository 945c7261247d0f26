#pragma once

// Joint multi-objective training loop and the fixed-ratio mixed baseline.

#include "moon/autodiff.hpp"
#include "moon/data.hpp"
#include "moon/encoder.hpp"
#include "moon/kv_config.hpp"
#include "moon/objectives.hpp"
#include "moon/optimizer.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moon {

enum class TrainMode { kJoint, kMixed };

std::string_view train_mode_name(TrainMode mode);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
  std::string train_path;  // JSONL triplets; may be empty when triplets are passed directly
  EncoderConfig encoder;
  FilterSchedule filter;  // total_steps is taken from `steps`
  bool filter_enabled = true;
  bool filter_detach = true;  // treat filter multipliers as constants in backward
  double tau = 0.07;
  double tau_tilde = 0.07;
  double alpha_aux = 0.01;
  double beta = 0.01;
  int batch_size = 32;
  int steps = 2000;
  double learning_rate = 1e-5;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kJoint;
  std::array<int, 3> mixed_ratio{12, 3, 2};  // image : text : multimodal
  OmegaMode omega_mode = OmegaMode::kRenormalized;
  bool omega_through_preferences = true;  // let omega's gradient reach the dual-alignment matrix
  bool use_intra = true;

  void validate() const;
  KvConfig to_kv() const;
  static TrainConfig from_kv(const KvConfig& kv);
  std::string hash() const;
};

struct StepMetrics {
  int step = 0;
  TrainMode mode = TrainMode::kJoint;
  std::optional<Modality> query_modality;  // MIXED only
  LossBreakdown breakdown;
  double delta_bar = 0;
  double learning_rate = 0;

  std::string to_json() const;
};

/// Records the loss of one batch on `tape`. JOINT builds all objectives;
/// `mixed_modality` restricts the batch to one inter objective (baseline).
/// `step` drives the filter offset.
template <typename Scalar>
ad::Var build_batch_loss(ad::Tape<Scalar>& tape, const Encoder<Scalar>& encoder, std::span<const Triplet* const> batch,
                         const TrainConfig& config, int step, std::optional<Modality> mixed_modality,
                         LossBreakdown* breakdown);

/// Deterministic MIXED modality sequence: each cycle of sum(ratio) steps holds
/// exactly ratio[j] slots of each modality in seeded-shuffled order.
class MixedSchedule {
 public:
  MixedSchedule(std::array<int, 3> ratio, std::uint64_t seed);
  Modality next();

 private:
  std::array<int, 3> ratio_;
  std::mt19937_64 rng_;
  std::vector<Modality> cycle_;
  std::size_t pos_ = 0;
};

/// Samples batches of distinct triplets by walking seeded epoch permutations;
/// each batch is returned sorted by triplet id.
class BatchSampler {
 public:
  BatchSampler(std::span<const Triplet> data, int batch_size, std::uint64_t seed);
  std::vector<const Triplet*> next();

 private:
  std::span<const Triplet> data_;
  int batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

class Trainer {
 public:
  Trainer(TrainConfig config, std::span<const Triplet> data);

  /// One optimizer update; throws NumericError naming the step on non-finite loss.
  StepMetrics step();
  int steps_done() const { return step_; }
  bool finished() const { return step_ >= config_.steps; }

  const Encoder<float>& encoder() const { return encoder_; }
  Encoder<float>& encoder() { return encoder_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  std::span<const Triplet> data_;
  Encoder<float> encoder_;
  AdamW<float> optimizer_;
  BatchSampler sampler_;
  MixedSchedule mixed_;
  int step_ = 0;
};

struct TrainResult {
  std::vector<StepMetrics> log;
};

using StepCallback = std::function<void(const StepMetrics&)>;

/// Runs the configured number of steps on `data`; returns the trained encoder via `trainer`.
TrainResult run_training(Trainer& trainer, const StepCallback& on_step = {});

/// File-level entry point: loads config.train_path, trains, writes the
/// checkpoint and a JSONL metrics log (one line per step).
TrainResult train(const TrainConfig& config, const std::filesystem::path& checkpoint_path,
                  const std::filesystem::path& metrics_path);

extern template ad::Var build_batch_loss<float>(ad::Tape<float>&, const Encoder<float>&, std::span<const Triplet* const>,
                                                const TrainConfig&, int, std::optional<Modality>, LossBreakdown*);
extern template ad::Var build_batch_loss<double>(ad::Tape<double>&, const Encoder<double>&,
                                                 std::span<const Triplet* const>, const TrainConfig&, int,
                                                 std::optional<Modality>, LossBreakdown*);

}  // namespace moon
