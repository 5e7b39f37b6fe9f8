#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "ual/error.hpp"

namespace ual {

// Label-smoothed cross-entropy. The target distribution mixes the one-hot
// target with a uniform distribution over the whole vocabulary (target
// included): q_k = (1 - v) * [k == target] + v / V.

/// log-sum-exp of a row, shifted by its maximum.
template <typename Real>
Real log_sum_exp(std::span<const Real> row) {
  const Real max = *std::max_element(row.begin(), row.end());
  Real sum = 0;
  for (Real x : row) sum += std::exp(x - max);
  return max + std::log(sum);
}

template <typename Real>
Real smoothed_token_loss(std::span<const Real> logits, std::size_t target, double v) {
  assert(logits.size() >= 2 && target < logits.size());
  const Real lse = log_sum_exp(logits);
  Real sum_log_p = 0;
  for (Real x : logits) sum_log_p += x - lse;
  const Real log_p_target = logits[target] - lse;
  const Real smooth = static_cast<Real>(v);
  const Real vocab = static_cast<Real>(logits.size());
  return -((1 - smooth) * log_p_target + (smooth / vocab) * sum_log_p);
}

/// Writes p - q into `grad` (same length as `logits`).
template <typename Real>
void smoothed_token_grad(std::span<const Real> logits, std::size_t target, double v, std::span<Real> grad) {
  assert(grad.size() == logits.size() && target < logits.size());
  const Real lse = log_sum_exp(logits);
  const Real uniform = static_cast<Real>(v) / static_cast<Real>(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) grad[k] = std::exp(logits[k] - lse) - uniform;
  grad[target] -= 1 - static_cast<Real>(v);
}

template <typename Real>
std::vector<Real> smoothed_token_grad(std::span<const Real> logits, std::size_t target, double v) {
  std::vector<Real> grad(logits.size());
  smoothed_token_grad<Real>(logits, target, v, grad);
  return grad;
}

/// Row-major T x V logits plus per-position targets and loss mask.
template <typename Real>
struct SequenceLossSpec {
  std::span<const Real> logits;
  std::size_t vocab_size = 0;
  std::span<const int> targets;
  std::span<const std::uint8_t> loss_mask;  // nonzero = counted
  double smoothing = 0.0;
};

/// Mean smoothed loss over masked positions. Throws EmptyMask.
template <typename Real>
Real sequence_loss(const SequenceLossSpec<Real>& spec) {
  const std::size_t steps = spec.targets.size();
  if (spec.loss_mask.size() != steps || spec.logits.size() != steps * spec.vocab_size) {
    throw ShapeMismatch("logits/targets/mask lengths disagree");
  }
  Real total = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    if (!spec.loss_mask[t]) continue;
    total += smoothed_token_loss<Real>(spec.logits.subspan(t * spec.vocab_size, spec.vocab_size),
                                       static_cast<std::size_t>(spec.targets[t]), spec.smoothing);
    ++count;
  }
  if (count == 0) throw EmptyMask();
  return total / static_cast<Real>(count);
}

}  // namespace ual
