#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "guided_attn/numcore/tensor.hpp"

// Differentiable primitives. Each op records a tape node when any input is
// on a tape and returns a constant otherwise. 2-D tensors are row-major
// [rows x cols].
namespace guided_attn::numcore {

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor);
template <typename Real>
Tensor<Real> square(const Tensor<Real>& a);

// a: [n x d], bias: d values (any shape) broadcast over rows.
template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& a, const Tensor<Real>& bias);

// [m x k] * [k x n]
template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b);
// [m x k] * [n x k]^T
template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b);
template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a);

// Shares storage; the gradient passes through unchanged.
template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape);

// out[i] = a[index[i]]. Adjoint scatter-adds. Indices may repeat.
template <typename Real>
Tensor<Real> gather(const Tensor<Real>& a, std::span<const std::size_t> index, Shape out_shape);

template <typename Real>
Tensor<Real> narrow_cols(const Tensor<Real>& a, std::size_t start, std::size_t count);
template <typename Real>
Tensor<Real> concat_cols(std::span<const Tensor<Real>> parts);
template <typename Real>
Tensor<Real> concat_rows(std::span<const Tensor<Real>> parts);

// Normalizes each row of x: [n x d] over its d entries.
template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-5));

// Exact (erf) GELU.
template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x);

// Numerically stable softmax along `axis`. Non-finite input throws NumericalError.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis);

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x);
template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x);
// [m x n] -> [1 x n]
template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x);
// x / sum(x)
template <typename Real>
Tensor<Real> normalize_sum(const Tensor<Real>& x);

// Batch-mean of -log softmax(logits)[label], via log-sum-exp.
// logits: [batch x classes].
template <typename Real>
Tensor<Real> cross_entropy_logits(const Tensor<Real>& logits, std::span<const int> labels);

// Index map turning x: [C x D x H x W] into rows of non-overlapping
// patches [N x C*pd*ph*pw]. Patches are enumerated depth-major, then
// height, then width; within a patch the order is (c, dz, dy, dx).
std::vector<std::size_t> patchify_index(const std::array<std::size_t, 4>& extents,
                                        const std::array<std::size_t, 3>& patch);

template <typename Real>
Tensor<Real> patchify(const Tensor<Real>& x, const std::array<std::size_t, 3>& patch);

}  // namespace guided_attn::numcore
