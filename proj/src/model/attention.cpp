#include "guided_attn/model/attention.hpp"

#include <cmath>
#include <vector>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/numcore/ops.hpp"

namespace guided_attn::model {

namespace nc = numcore;

template <typename Real>
PooledAttention<Real> attention_pool(const Tensor<Real>& query, const Tensor<Real>& tokens,
                                     const AttentionWeights<Real>& w, std::size_t n_heads) {
  if (query.rank() != 2 || query.dim(0) != 1) throw UsageError("attention_pool: query must be [1 x d]");
  if (tokens.rank() != 2 || tokens.dim(1) != query.dim(1)) {
    throw UsageError("attention_pool: tokens " + nc::shape_to_string(tokens.shape()) + " do not match query " +
                     nc::shape_to_string(query.shape()));
  }
  const std::size_t d = w.q_w.dim(1);
  if (n_heads == 0 || d % n_heads != 0) throw UsageError("attention_pool: heads must divide the model width");
  const std::size_t dh = d / n_heads;
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));

  auto q = nc::add_bias(nc::matmul(query, w.q_w), w.q_b);
  auto k = nc::add_bias(nc::matmul(tokens, w.k_w), w.k_b);
  auto v = nc::add_bias(nc::matmul(tokens, w.v_w), w.v_b);

  std::vector<Tensor<Real>> head_out, head_weights;
  for (std::size_t h = 0; h < n_heads; ++h) {
    auto qh = nc::narrow_cols(q, h * dh, dh);
    auto kh = nc::narrow_cols(k, h * dh, dh);
    auto vh = nc::narrow_cols(v, h * dh, dh);
    auto weights = nc::softmax(nc::scale(nc::matmul_nt(qh, kh), inv_sqrt), 1);  // [1 x N]
    head_out.push_back(nc::matmul(weights, vh));
    head_weights.push_back(weights);
  }
  auto merged = n_heads == 1 ? head_out[0] : nc::concat_cols<Real>(head_out);
  auto output = nc::add_bias(nc::matmul(merged, w.out_w), w.out_b);
  auto weights = n_heads == 1 ? head_weights[0] : nc::concat_rows<Real>(head_weights);
  return {output, weights};
}

template <typename Real>
Tensor<Real> self_attention(const Tensor<Real>& tokens, const Tensor<Real>& qkv_w, const Tensor<Real>& qkv_b,
                            const Tensor<Real>& out_w, const Tensor<Real>& out_b, std::size_t n_heads) {
  const std::size_t d = tokens.dim(1);
  if (n_heads == 0 || d % n_heads != 0) throw UsageError("self_attention: heads must divide the model width");
  const std::size_t dh = d / n_heads;
  const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
  auto qkv = nc::add_bias(nc::matmul(tokens, qkv_w), qkv_b);
  std::vector<Tensor<Real>> heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    auto qh = nc::narrow_cols(qkv, h * dh, dh);
    auto kh = nc::narrow_cols(qkv, d + h * dh, dh);
    auto vh = nc::narrow_cols(qkv, 2 * d + h * dh, dh);
    auto p = nc::softmax(nc::scale(nc::matmul_nt(qh, kh), inv_sqrt), 1);
    heads.push_back(nc::matmul(p, vh));
  }
  auto merged = n_heads == 1 ? heads[0] : nc::concat_cols<Real>(heads);
  return nc::add_bias(nc::matmul(merged, out_w), out_b);
}

template PooledAttention<float> attention_pool(const Tensor<float>&, const Tensor<float>&,
                                               const AttentionWeights<float>&, std::size_t);
template PooledAttention<double> attention_pool(const Tensor<double>&, const Tensor<double>&,
                                                const AttentionWeights<double>&, std::size_t);
template Tensor<float> self_attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> self_attention(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&, const Tensor<double>&, std::size_t);

}  // namespace guided_attn::model
