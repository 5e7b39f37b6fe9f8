#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace ual {

/// Shape of the decoder-only transformer.
struct ModelConfig {
  int vocab_size = 259;
  int context_length = 256;
  int embed_dim = 128;
  int num_layers = 4;
  int num_heads = 4;
  int mlp_ratio = 4;
  std::uint64_t seed = 0;

  int head_dim() const noexcept { return embed_dim / num_heads; }
  int hidden_dim() const noexcept { return embed_dim * mlp_ratio; }

  /// Throws InputError when an invariant does not hold.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ModelConfig, vocab_size, context_length, embed_dim, num_layers, num_heads,
                                   mlp_ratio, seed)

struct TensorInfo {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  bool operator==(const TensorInfo&) const = default;
};

/// Offsets of every named tensor inside one flat parameter buffer.
struct ParameterLayout {
  struct Block {
    std::size_t ln1_gain, ln1_bias;
    std::size_t query, key, value, output;
    std::size_t ln2_gain, ln2_bias;
    std::size_t fc_in, fc_in_bias, fc_out, fc_out_bias;
  };

  std::vector<TensorInfo> tensors;
  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<Block> blocks;
  std::size_t final_gain = 0;
  std::size_t final_bias = 0;
  std::size_t lm_head = 0;
  std::size_t total = 0;

  static ParameterLayout for_config(const ModelConfig& config);
  const TensorInfo* find(const std::string& name) const noexcept;
};

/// Flat, named parameter (or gradient) buffer.
template <typename Real>
struct Parameters {
  ModelConfig config;
  ParameterLayout layout;
  std::vector<Real> data;

  static Parameters zeros(const ModelConfig& config);
  /// N(0, 0.02) weights with residual projections scaled by 1/sqrt(2L),
  /// unit layer-norm gains and zero biases. Seeded from config.seed.
  static Parameters initialized(const ModelConfig& config);

  std::span<Real> tensor(const TensorInfo& info) { return {data.data() + info.offset, info.size}; }
  std::span<const Real> tensor(const TensorInfo& info) const { return {data.data() + info.offset, info.size}; }

  template <typename Other>
  Parameters<Other> cast() const {
    Parameters<Other> out{config, layout, std::vector<Other>(data.size())};
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
    return out;
  }
};

/// Row-major B x T token matrix.
struct TokenBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;

  std::span<const int> row(std::size_t b) const { return {tokens.data() + b * seq_len, seq_len}; }
};

/// Everything the loss needs for one training step.
struct Batch {
  TokenBatch inputs;
  std::vector<int> targets;            // B x T, kPad where unused
  std::vector<std::uint8_t> loss_mask;  // B x T, 1 = response token
  std::vector<double> smoothing;        // per sample
  std::vector<std::string> sample_ids;

  std::size_t batch_size() const noexcept { return inputs.batch_size; }
  std::size_t seq_len() const noexcept { return inputs.seq_len; }
};

template <typename Real>
struct ForwardResult {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<Real> logits;                  // B x T x V
  std::optional<std::vector<Real>> features;  // B x T x d, final layer-norm output
};

template <typename Real>
struct LossAndGrad {
  Real loss = 0;
  Parameters<Real> grads;
  std::vector<double> sample_nll;  // mean masked NLL per sample (no smoothing)
  std::vector<double> smoothing;   // smoothing actually applied per sample
};

/// Called once per sample, in batch order, with the sample's unsmoothed mean
/// NLL; returns the smoothing value to train that sample with.
using SmoothingOverride = std::function<double(std::size_t sample, double mean_nll)>;

template <typename Real>
ForwardResult<Real> forward(const Parameters<Real>& params, const TokenBatch& tokens, bool want_features);

/// Mean over samples of each sample's mean smoothed loss over its masked
/// positions, with exact gradients. Per-sample gradients are reduced in
/// batch order, so the result does not depend on `threads`.
template <typename Real>
LossAndGrad<Real> loss_and_grad(const Parameters<Real>& params, const Batch& batch,
                                const SmoothingOverride& override_smoothing = {}, int threads = 1);

extern template struct Parameters<float>;
extern template struct Parameters<double>;
extern template ForwardResult<float> forward(const Parameters<float>&, const TokenBatch&, bool);
extern template ForwardResult<double> forward(const Parameters<double>&, const TokenBatch&, bool);
extern template LossAndGrad<float> loss_and_grad(const Parameters<float>&, const Batch&, const SmoothingOverride&, int);
extern template LossAndGrad<double> loss_and_grad(const Parameters<double>&, const Batch&, const SmoothingOverride&, int);

}  // namespace ual
