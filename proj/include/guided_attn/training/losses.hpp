#pragma once

#include <array>
#include <span>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::training {

using numcore::Tensor;

struct LossReport {
  double total = 0.0;
  double cls = 0.0;
  double loc = 0.0;
};

// Batch-mean cross-entropy from logits [B x 2] via log-sum-exp.
template <typename Real>
Tensor<Real> loss_cls(const Tensor<Real>& logits, std::span<const int> labels);

// Batch-mean -log p[y] from probability pairs; an exact zero at the true
// class is clamped to 1e-12 with a warning.
double loss_cls_from_probabilities(std::span<const std::array<double, 2>> probabilities, std::span<const int> labels);

// Gaussian-blurred mask scaled to unit sum [1 x D x H x W]; not trainable.
// Throws DataError for an empty mask.
Tensor<float> make_target(const Tensor<float>& mask, double sigma);

// Mean over voxels of (A_s - M_s)^2. Gradient reaches `attention` only.
template <typename Real>
Tensor<Real> loss_loc(const Tensor<Real>& attention, const Tensor<Real>& target);

template <typename Real>
struct CompositeLoss {
  Tensor<Real> total;
  LossReport report;
};

// L = L_cls + lambda * L_loc. With lambda == 0 the attention arguments are
// ignored and L is the cross-entropy tensor itself.
template <typename Real>
CompositeLoss<Real> composite_loss(const Tensor<Real>& logits, std::span<const int> labels,
                                   const Tensor<Real>* attention, const Tensor<Real>* target, double lambda);

}  // namespace guided_attn::training
