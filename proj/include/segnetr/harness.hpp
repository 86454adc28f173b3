#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "segnetr/metrics.hpp"
#include "segnetr/model.hpp"

namespace segnetr::harness {

// -------------------- synthetic data --------------------

struct SyntheticSample {
  std::vector<float> image;  // [channels, size, size], values in [0,1]
  std::vector<int> mask;     // [size, size]
  std::uint64_t seed = 0;
};

struct SyntheticOptions {
  std::size_t channels = 3;
  double noise_sigma = 0.1;
};

struct Dataset {
  std::size_t size = 0, channels = 0, num_classes = 0;
  std::vector<SyntheticSample> samples;
};

/// Sample i depends only on (seed, i): 1-3 ellipses or rectangles with
/// classes 1..K-1 over background 0.
Dataset gen_synthetic(std::size_t n, std::size_t size, std::size_t num_classes, std::uint64_t seed,
                      SyntheticOptions opt = {});

SyntheticSample make_sample(std::size_t size, std::size_t num_classes, std::uint64_t sample_seed,
                            SyntheticOptions opt = {});

/// Stacks samples into [B,C,H,W] and the flat class map.
void make_batch(const Dataset& data, const std::vector<std::size_t>& indices, Tensor<float>& images,
                std::vector<int>& targets);

// -------------------- checkpoints --------------------

class CheckpointError : public Error {
public:
  using Error::Error;
};
class CheckpointMagicError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "SGNR", u32 version, u32 count, then per tensor: u16 name length, name,
/// u8 rank, u32 extents, little-endian f32 data. Registry order.
std::vector<std::uint8_t> serialize_checkpoint(const nn::Registry<float>& reg);
void deserialize_checkpoint(nn::Registry<float>& reg, const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const model::Network<float>& net, const std::string& path);
void load_checkpoint(model::Network<float>& net, const std::string& path);

// -------------------- training --------------------

struct LogRow {
  std::size_t step = 0;
  double loss = 0;
  std::optional<double> mean_iou, mean_dice;
};

struct TrainOptions {
  std::size_t steps = 500;
  std::size_t batch_size = 4;
  double lr = 1e-4;
  std::size_t eval_interval = 50;
  std::size_t train_samples = 256;
  std::size_t eval_samples = 32;
  SyntheticOptions data{};
  std::optional<double> stop_at_dice;  // end after the first evaluation reaching it
  std::string out_dir;                 // metrics.csv, model.ckpt, config.json when non-empty
  std::function<void(const LogRow&)> on_eval;
};

struct TrainResult {
  std::vector<LogRow> log;  // one row per step
  std::size_t steps_run = 0;
  double initial_loss = 0;
  double final_loss = 0;  // mean over the last min(20, steps) steps
  double final_dice = 0;
  double final_iou = 0;
};

/// Train / held-out splits come from independent streams derived from the
/// config seed.
Dataset train_split(const model::ModelConfig& cfg, const TrainOptions& opt);
Dataset eval_split(const model::ModelConfig& cfg, const TrainOptions& opt);

/// Adam on mean cross-entropy. Throws NumericError naming the step if the
/// loss is not finite.
TrainResult train(model::Network<float>& net, const TrainOptions& opt);

/// Dataset-pooled confusion with foreground means (classes 1..K-1).
/// Inference mode; parameters are not touched.
metrics::Scores evaluate(model::Network<float>& net, const Dataset& data, std::size_t batch_size = 4);

std::string metrics_csv(const std::vector<LogRow>& log);

}  // namespace segnetr::harness
