#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::numcore {

// Normalized 1-D Gaussian taps truncated at ceil(3*sigma); sigma == 0
// yields the single tap {1}.
std::vector<double> gaussian_kernel(double sigma);

// Separable Gaussian smoothing of every channel of x: [C x D x H x W] with
// per-axis sigma (depth, height, width) in voxels. Zero padding, no
// renormalization at the boundary. The result is always a constant: this
// operator never records a tape node.
template <typename Real>
Tensor<Real> gaussian_blur3d(const Tensor<Real>& x, const std::array<double, 3>& sigma);

// Trilinear resampling of x: [C x D' x H' x W'] to [C x D x H x W] with
// the align-corners convention. Differentiable; the adjoint applies the
// transposed interpolation weights.
template <typename Real>
Tensor<Real> resample_trilinear(const Tensor<Real>& x, const std::array<std::size_t, 3>& target);

// Nearest-neighbour counterpart (same coordinate convention), for label maps.
template <typename Real>
Tensor<Real> resample_nearest(const Tensor<Real>& x, const std::array<std::size_t, 3>& target);

}  // namespace guided_attn::numcore
