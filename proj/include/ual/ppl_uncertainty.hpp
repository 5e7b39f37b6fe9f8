#pragma once

namespace ual {

/// Exponential moving average of per-sample perplexity.
struct PplState {
  double running_mean = 0.0;
  bool initialized = false;
  double decay = 0.99;
};

struct PplSmoothing {
  double value = 0.0;
  PplState state;
};

/// Smoothing from the ratio of a sample's perplexity to the running average:
/// min(alpha * ppl / running_mean, max_smoothing). The first call seeds the
/// average and returns alpha; later calls fold `ppl` into the average after
/// computing the value. Throws NonPositivePpl and InputError.
PplSmoothing ppl_smoothing(double ppl, const PplState& state, double alpha, double max_smoothing);

}  // namespace ual
