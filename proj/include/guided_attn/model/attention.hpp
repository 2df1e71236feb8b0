#pragma once

#include <cstddef>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::model {

using numcore::Tensor;

// Projection parameters of one multi-head attention: input dim d, output
// dim d, heads split the d columns evenly.
template <typename Real>
struct AttentionWeights {
  Tensor<Real> q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
};

template <typename Real>
struct PooledAttention {
  Tensor<Real> output;   // [1 x d]
  Tensor<Real> weights;  // [n_heads x N], each row sums to 1
};

// Class-token pooling: MHA(query, tokens, tokens) with a single query row.
// No positional information is added, so the result is invariant to token
// order and the weights permute with the tokens.
template <typename Real>
PooledAttention<Real> attention_pool(const Tensor<Real>& query, const Tensor<Real>& tokens,
                                     const AttentionWeights<Real>& w, std::size_t n_heads);

// Multi-head self-attention over tokens [N x d] with a fused qkv
// projection [d x 3d].
template <typename Real>
Tensor<Real> self_attention(const Tensor<Real>& tokens, const Tensor<Real>& qkv_w, const Tensor<Real>& qkv_b,
                            const Tensor<Real>& out_w, const Tensor<Real>& out_b, std::size_t n_heads);

}  // namespace guided_attn::model
