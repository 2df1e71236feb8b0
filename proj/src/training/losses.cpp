#include "guided_attn/training/losses.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/numcore/ops.hpp"
#include "guided_attn/numcore/signal.hpp"

namespace guided_attn::training {

namespace nc = numcore;

template <typename Real>
Tensor<Real> loss_cls(const Tensor<Real>& logits, std::span<const int> labels) {
  return nc::cross_entropy_logits(logits, labels);
}

double loss_cls_from_probabilities(std::span<const std::array<double, 2>> probabilities, std::span<const int> labels) {
  if (probabilities.size() != labels.size() || labels.empty()) {
    throw UsageError("loss_cls: need one label per probability pair");
  }
  double sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw UsageError("loss_cls: labels must be 0 or 1");
    double p = probabilities[i][static_cast<std::size_t>(labels[i])];
    if (p <= 0.0) {
      spdlog::warn("loss_cls: probability of the true class is {}; clamped to 1e-12", p);
      p = 1e-12;
    }
    sum -= std::log(p);
  }
  return sum / static_cast<double>(labels.size());
}

Tensor<float> make_target(const Tensor<float>& mask, double sigma) {
  if (mask.rank() != 4 || mask.dim(0) != 1) throw UsageError("make_target expects a [1 x D x H x W] mask");
  const auto blurred = nc::gaussian_blur3d(mask, {sigma, sigma, sigma});
  double total = 0;
  for (float v : blurred.data()) total += v;
  if (!(total > 0.0)) throw DataError("make_target: empty mask");
  std::vector<float> out(blurred.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(blurred[i] / total);
  return Tensor<float>(mask.shape(), std::move(out));
}

template <typename Real>
Tensor<Real> loss_loc(const Tensor<Real>& attention, const Tensor<Real>& target) {
  if (attention.shape() != target.shape()) {
    throw UsageError("loss_loc: shape mismatch " + nc::shape_to_string(attention.shape()) + " vs " +
                     nc::shape_to_string(target.shape()));
  }
  return nc::mean(nc::square(nc::sub(attention, target.detach())));
}

template <typename Real>
CompositeLoss<Real> composite_loss(const Tensor<Real>& logits, std::span<const int> labels,
                                   const Tensor<Real>* attention, const Tensor<Real>* target, double lambda) {
  if (lambda < 0.0) throw UsageError("composite_loss: lambda must be non-negative");
  CompositeLoss<Real> out;
  const Tensor<Real> cls = loss_cls(logits, labels);
  out.report.cls = static_cast<double>(cls.item());
  if (lambda == 0.0) {
    out.total = cls;
    out.report.total = out.report.cls;
    return out;
  }
  if (attention == nullptr || target == nullptr) {
    throw UsageError("composite_loss: lambda > 0 requires an attention map and a target");
  }
  const Tensor<Real> loc = loss_loc(*attention, *target);
  out.report.loc = static_cast<double>(loc.item());
  out.report.total = out.report.cls + lambda * out.report.loc;
  out.total = nc::add(cls, nc::scale(loc, static_cast<Real>(lambda)));
  return out;
}

template Tensor<float> loss_cls(const Tensor<float>&, std::span<const int>);
template Tensor<double> loss_cls(const Tensor<double>&, std::span<const int>);
template Tensor<float> loss_loc(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> loss_loc(const Tensor<double>&, const Tensor<double>&);
template CompositeLoss<float> composite_loss(const Tensor<float>&, std::span<const int>, const Tensor<float>*,
                                             const Tensor<float>*, double);
template CompositeLoss<double> composite_loss(const Tensor<double>&, std::span<const int>, const Tensor<double>*,
                                              const Tensor<double>*, double);

}  // namespace guided_attn::training
