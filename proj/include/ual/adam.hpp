#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace ual {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment buffers plus the step counter used for bias correction.
template <typename Real>
struct AdamState {
  std::vector<Real> m;
  std::vector<Real> v;
  std::int64_t step = 0;

  static AdamState zeros(std::size_t n) { return {std::vector<Real>(n, Real{0}), std::vector<Real>(n, Real{0}), 0}; }
};

/// One bias-corrected Adam update, in place.
template <typename Real>
void adam_step(std::span<Real> params, std::span<const Real> grads, AdamState<Real>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state sizes differ");
  }
  ++state.step;
  const Real b1 = static_cast<Real>(cfg.beta1);
  const Real b2 = static_cast<Real>(cfg.beta2);
  const Real correction1 = static_cast<Real>(1.0 - std::pow(cfg.beta1, static_cast<double>(state.step)));
  const Real correction2 = static_cast<Real>(1.0 - std::pow(cfg.beta2, static_cast<double>(state.step)));
  const Real rate = static_cast<Real>(lr);
  const Real eps = static_cast<Real>(cfg.epsilon);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Real g = grads[i];
    state.m[i] = b1 * state.m[i] + (Real{1} - b1) * g;
    state.v[i] = b2 * state.v[i] + (Real{1} - b2) * g * g;
    const Real m_hat = state.m[i] / correction1;
    const Real v_hat = state.v[i] / correction2;
    params[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
  }
}

/// Scales `grads` so its L2 norm is at most `max_norm`; returns the norm before clipping.
template <typename Real>
double clip_global_norm(std::span<Real> grads, double max_norm) {
  double sq = 0.0;
  for (Real g : grads) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const Real scale = static_cast<Real>(max_norm / norm);
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

/// Linear warmup from lr/warmup to lr over `warmup` steps, then constant.
/// `step` is 1-based.
inline double warmup_lr(double lr, std::int64_t step, std::int64_t warmup) {
  if (warmup <= 0 || step >= warmup) return lr;
  return lr * static_cast<double>(step) / static_cast<double>(warmup);
}

}  // namespace ual
