#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ual/checkpoint.hpp"
#include "ual/dataset.hpp"
#include "ual/model.hpp"
#include "ual/smoothing.hpp"

namespace ual {

/// Token sequences for one sample: inputs[t] predicts targets[t]; mask marks
/// response positions (the final EOS included).
struct EncodedSample {
  std::string id;
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

/// [BOS] instruction response [EOS], shifted by one. When the sequence does
/// not fit `context_length` the instruction is cut from the left; a response
/// that alone does not fit is an InputError.
EncodedSample encode_sample(const Sample& sample, int context_length);

/// Right-pads the samples to the longest one with kPad.
Batch make_batch(std::span<const EncodedSample* const> samples, std::span<const double> smoothing);

enum class TrainMode { kSft, kLabelSmoothing, kUal, kUalPpl };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct HyperParams {
  double learning_rate = 3e-4;
  std::int64_t warmup_steps = 100;
  std::size_t batch_size = 16;
  std::int64_t epochs = 1;
  std::int64_t max_steps = 0;  // > 0 overrides epochs
  double grad_clip = 1.0;
  std::uint64_t seed = 0;      // shuffle order
  int threads = 1;
  bool deterministic = true;   // single thread, wall clock recorded as 0
  double ppl_decay = 0.99;
};

struct TrainOptions {
  TrainMode mode = TrainMode::kSft;
  double alpha = kDefaultAlpha;
  double max_smoothing = kDefaultMaxSmoothing;
  std::optional<SmoothingPlan> plan;  // required for kUal
  HyperParams hyper;
};

struct MetricsRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double loss = 0.0;
  double mean_smoothing = 0.0;
  double ppl = 0.0;  // exp of the batch's mean unsmoothed response NLL
  double learning_rate = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

/// One compact JSON object, fixed key order, no trailing newline.
std::string to_json_line(const MetricsRecord& record);

struct TrainOutputs {
  std::optional<std::filesystem::path> metrics_path;     // JSON lines, flushed per step
  std::optional<std::filesystem::path> checkpoint_path;  // written atomically at the end
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<MetricsRecord> metrics;
};

/// Trains from `config.seed` initialization. Throws PlanDatasetMismatch or
/// InvalidHyper on bad options.
TrainResult train(const ModelConfig& config, const Dataset& dataset, const TrainOptions& options,
                  const TrainOutputs& outputs = {});

}  // namespace ual
