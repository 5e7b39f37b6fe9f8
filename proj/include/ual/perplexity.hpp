#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ual/checkpoint.hpp"
#include "ual/dataset.hpp"

namespace ual {

struct SamplePerplexity {
  std::string id;
  std::size_t tokens = 0;
  double mean_nll = 0.0;
  double ppl = 0.0;
};

struct PerplexityReport {
  std::vector<SamplePerplexity> samples;
  double corpus_ppl = 0.0;       // exp(total NLL / total response tokens)
  double mean_sample_ppl = 0.0;  // arithmetic mean of per-sample PPL
};

/// Mean negative log-likelihood over masked positions of a T x V logits block.
/// Throws EmptyMask.
double masked_mean_nll(std::span<const float> logits, std::size_t vocab_size, std::span<const int> targets,
                       std::span<const std::uint8_t> mask);

/// Perplexity of every sample's response tokens (EOS included), no smoothing.
/// Throws EmptyCorpus.
PerplexityReport evaluate_ppl(const Checkpoint& checkpoint, const Dataset& corpus);

}  // namespace ual
