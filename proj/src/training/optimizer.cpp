#include "guided_attn/training/optimizer.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::training {

template <typename Real>
bool adam_step(std::vector<numcore::Tensor<Real>>& params, const std::vector<std::vector<Real>>& grads,
               std::span<const std::size_t> active, AdamState& state, const AdamConfig& cfg) {
  if (grads.size() != params.size()) throw UsageError("adam_step: one gradient buffer per parameter required");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  for (std::size_t i : active) {
    if (grads[i].size() != params[i].numel()) throw UsageError("adam_step: gradient size mismatch");
    for (Real g : grads[i]) {
      if (!std::isfinite(static_cast<double>(g))) {
        spdlog::warn("adam_step: non-finite gradient, step {} skipped", state.t + 1);
        return false;
      }
    }
  }
  const std::uint64_t t = ++state.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i : active) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const std::size_t n = params[i].numel();
    if (m.size() != n) {
      m.assign(n, 0.0);
      v.assign(n, 0.0);
    }
    std::vector<Real> next(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double g = grads[i][k];
      double p = params[i][k];
      p -= cfg.lr * cfg.weight_decay * p;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      p -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
      next[k] = static_cast<Real>(p);
    }
    params[i] = numcore::Tensor<Real>(params[i].shape(), std::move(next));
  }
  return true;
}

template bool adam_step(std::vector<numcore::Tensor<float>>&, const std::vector<std::vector<float>>&,
                        std::span<const std::size_t>, AdamState&, const AdamConfig&);
template bool adam_step(std::vector<numcore::Tensor<double>>&, const std::vector<std::vector<double>>&,
                        std::span<const std::size_t>, AdamState&, const AdamConfig&);

}  // namespace guided_attn::training
