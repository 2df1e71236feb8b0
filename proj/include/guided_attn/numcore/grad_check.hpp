#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::numcore {

// A scalar function of a list of parameters. It receives the parameters
// either as tape leaves (gradient pass) or as constants (perturbed
// evaluations) and must build its graph from them only.
using ScalarFunction = std::function<Tensor<double>(std::span<const Tensor<double>>)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // Five-point central stencil (error O(eps^4)) instead of the two-point one.
  // It allows a larger eps and so far less cancellation roundoff.
  bool fourth_order = false;
  // Coordinates checked per parameter tensor; 0 checks every coordinate.
  std::size_t coords_per_param = 0;
  std::uint64_t seed = 0;
  // Lower bound on the error denominator. Coordinates whose true gradient is
  // zero then need |g_ad - g_fd| below floor * tolerance.
  double denominator_floor = 1e-6;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_coord = 0;
  double worst_autodiff = 0.0;
  double worst_numeric = 0.0;
};

// Compares reverse-mode gradients with central differences. The error of a
// coordinate is |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor). Parameters the
// loss does not reach contribute zero on both sides. Throws UsageError when
// two evaluations of f at the same point differ.
GradCheckReport grad_check(const ScalarFunction& f, const std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options = {});

}  // namespace guided_attn::numcore
