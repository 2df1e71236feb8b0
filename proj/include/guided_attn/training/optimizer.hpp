#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::training {

struct AdamConfig {
  double lr = 5e-5;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First and second moments per parameter tensor; t counts applied steps.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

// One Adam step with bias correction on the listed parameters. Decoupled
// weight decay is applied first as p -= lr * wd * p. Returns false and leaves
// everything untouched when any listed gradient is non-finite.
template <typename Real>
bool adam_step(std::vector<numcore::Tensor<Real>>& params, const std::vector<std::vector<Real>>& grads,
               std::span<const std::size_t> active, AdamState& state, const AdamConfig& cfg);

}  // namespace guided_attn::training
