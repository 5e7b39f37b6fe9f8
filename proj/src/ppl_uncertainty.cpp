#include "ual/ppl_uncertainty.hpp"

#include <algorithm>
#include <cmath>

#include "ual/error.hpp"

namespace ual {

PplSmoothing ppl_smoothing(double ppl, const PplState& state, double alpha, double max_smoothing) {
  if (!(ppl > 0.0) || !std::isfinite(ppl)) throw NonPositivePpl(ppl);
  if (!(max_smoothing > 0.0 && max_smoothing < 1.0) || !(alpha > 0.0 && alpha < max_smoothing)) {
    throw InputError("ppl smoothing needs 0 < alpha < v_t < 1");
  }
  if (!(state.decay >= 0.0 && state.decay < 1.0)) throw InputError("ppl decay must lie in [0, 1)");

  PplSmoothing out{alpha, state};
  if (!state.initialized) {
    out.state.running_mean = ppl;
    out.state.initialized = true;
    return out;
  }
  if (!(state.running_mean > 0.0)) throw InputError("ppl running mean must be positive");
  out.value = std::min(alpha * ppl / state.running_mean, max_smoothing);
  out.state.running_mean = state.decay * state.running_mean + (1.0 - state.decay) * ppl;
  return out;
}

}  // namespace ual
