#include "guided_attn/numcore/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::numcore {

GradCheckReport grad_check(const ScalarFunction& f, const std::vector<Tensor<double>>& params,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw UsageError("grad_check: eps must be positive");

  std::vector<Tensor<double>> constants;
  constants.reserve(params.size());
  for (const auto& p : params) constants.push_back(p.detach());

  const double first = f(constants).item();
  const double second = f(constants).item();
  if (first != second && !(std::isnan(first) && std::isnan(second))) {
    throw UsageError("grad_check: function is not deterministic");
  }

  Tape<double> tape;
  std::vector<Tensor<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.leaf(p));
  const Tensor<double> loss = f(leaves);
  if (loss.tape() != &tape) throw UsageError("grad_check: loss does not depend on the parameters");
  tape.backward(loss);

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const std::size_t n = params[pi].numel();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.coords_per_param > 0 && options.coords_per_param < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    const auto grad = tape.grad(leaves[pi]);
    for (std::size_t c : coords) {
      const double g_ad = grad.empty() ? 0.0 : grad[c];
      std::vector<double> values(params[pi].data().begin(), params[pi].data().end());
      const double origin = values[c];

      auto evaluate = [&](double v) {
        values[c] = v;
        std::vector<Tensor<double>> args = constants;
        args[pi] = Tensor<double>(params[pi].shape(), values);
        return f(args).item();
      };
      const double h = options.eps;
      const double d1 = evaluate(origin + h) - evaluate(origin - h);
      double g_fd = d1 / (2.0 * h);
      if (options.fourth_order) {
        const double d2 = evaluate(origin + 2.0 * h) - evaluate(origin - 2.0 * h);
        g_fd = (8.0 * d1 - d2) / (12.0 * h);
      }

      const double denom = std::max({std::abs(g_ad), std::abs(g_fd), options.denominator_floor});
      const double err = std::abs(g_ad - g_fd) / denom;
      ++report.coords_checked;
      if (err > report.max_relative_error || std::isnan(err)) {
        report.max_relative_error = err;
        report.worst_param = pi;
        report.worst_coord = c;
        report.worst_autodiff = g_ad;
        report.worst_numeric = g_fd;
      }
    }
  }
  return report;
}

}  // namespace guided_attn::numcore
