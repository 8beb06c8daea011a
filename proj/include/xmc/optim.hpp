#pragma once

// Adam with bias correction, global-norm gradient clipping and the dropout
// mask helper. The learning rate decays multiplicatively once per epoch
// (end_epoch), matching the training schedule.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "xmc/autodiff.hpp"
#include "xmc/rng.hpp"
#include "xmc/tensor.hpp"

namespace xmc {

struct AdamConfig {
  double alpha = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.9;  // per-epoch learning-rate multiplier
};

struct AdamState {
  AdamConfig cfg;
  double alpha = 3e-4;  // current (decayed) learning rate
  std::uint64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  AdamState() = default;
  AdamState(const std::vector<ad::ValuePtr>& params, AdamConfig c)
      : cfg(c), alpha(c.alpha) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& p : params) {
      m.emplace_back(p->data.dims);
      v.emplace_back(p->data.dims);
    }
  }
};

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the applied scale (1 when already within bounds or all zero).
inline double clip_global_norm(const std::vector<ad::ValuePtr>& params,
                               double max_norm) {
  if (max_norm <= 0.0)
    throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p->has_grad) continue;
    for (double g : p->grad.v) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return 1.0;
  const double scale = max_norm / norm;
  for (const auto& p : params) {
    if (!p->has_grad) continue;
    for (double& g : p->grad.v) g *= scale;
  }
  return scale;
}

inline void adam_step(const std::vector<ad::ValuePtr>& params,
                      AdamState& state) {
  if (params.size() != state.m.size())
    throw std::invalid_argument("adam_step: state/parameter count mismatch");
  state.t += 1;
  const double b1 = state.cfg.beta1, b2 = state.cfg.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    ad::Node* p = params[i].get();
    if (!p->requires_grad || !p->has_grad)
      throw std::invalid_argument("adam_step: parameter '" + p->name +
                                  "' has no gradient");
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p->data.size(); ++j) {
      const double g = p->grad.v[j];
      m.v[j] = b1 * m.v[j] + (1.0 - b1) * g;
      v.v[j] = b2 * v.v[j] + (1.0 - b2) * g * g;
      const double mhat = m.v[j] / bc1;
      const double vhat = v.v[j] / bc2;
      p->data.v[j] -= state.alpha * mhat / (std::sqrt(vhat) + state.cfg.eps);
    }
  }
}

inline void adam_end_epoch(AdamState& state) { state.alpha *= state.cfg.decay; }

// Inverted-dropout mask: kept entries carry 1/(1-rate) so inference needs no
// rescaling; at inference the mask is all ones.
inline Tensor dropout_mask(const std::vector<std::size_t>& dims, double rate,
                           Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout_mask: rate must be in [0, 1)");
  Tensor mask(dims, 1.0);
  if (!training || rate == 0.0) return mask;
  const double keep = 1.0 - rate;
  for (double& x : mask.v) x = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return mask;
}

}  // namespace xmc
