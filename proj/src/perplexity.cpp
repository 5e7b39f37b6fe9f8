#include "ual/perplexity.hpp"

#include <cmath>

#include "ual/error.hpp"
#include "ual/loss.hpp"
#include "ual/trainer.hpp"

namespace ual {

double masked_mean_nll(std::span<const float> logits, std::size_t vocab_size, std::span<const int> targets,
                       std::span<const std::uint8_t> mask) {
  if (targets.size() != mask.size() || logits.size() != targets.size() * vocab_size) {
    throw ShapeMismatch("logits/targets/mask lengths disagree");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (!mask[t]) continue;
    const auto row = logits.subspan(t * vocab_size, vocab_size);
    total += static_cast<double>(smoothed_token_loss<float>(row, static_cast<std::size_t>(targets[t]), 0.0));
    ++count;
  }
  if (count == 0) throw EmptyMask();
  return total / static_cast<double>(count);
}

PerplexityReport evaluate_ppl(const Checkpoint& checkpoint, const Dataset& corpus) {
  if (corpus.empty()) throw EmptyCorpus();
  const auto& params = checkpoint.params;
  const auto V = static_cast<std::size_t>(params.config.vocab_size);
  PerplexityReport report;
  double total_nll = 0.0;
  std::size_t total_tokens = 0;
  double ppl_sum = 0.0;
  for (const auto& sample : corpus) {
    const auto enc = encode_sample(sample, params.config.context_length);
    TokenBatch tokens{1, enc.inputs.size(), enc.inputs};
    const auto fwd = forward(params, tokens, false);
    SamplePerplexity sp;
    sp.id = sample.id;
    for (auto m : enc.mask) sp.tokens += m ? 1 : 0;
    sp.mean_nll = masked_mean_nll(fwd.logits, V, enc.targets, enc.mask);
    sp.ppl = std::exp(sp.mean_nll);
    total_nll += sp.mean_nll * static_cast<double>(sp.tokens);
    total_tokens += sp.tokens;
    ppl_sum += sp.ppl;
    report.samples.push_back(std::move(sp));
  }
  report.corpus_ppl = std::exp(total_nll / static_cast<double>(total_tokens));
  report.mean_sample_ppl = ppl_sum / static_cast<double>(corpus.size());
  return report;
}

}  // namespace ual
