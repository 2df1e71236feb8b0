#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "guided_attn/model/attention.hpp"
#include "guided_attn/model/config.hpp"
#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::model {

using numcore::Shape;

enum class Module { kEncoder, kEarlyAttention, kLateAttention, kClinicalProjector, kHead };

enum class Init { kTruncNormal, kZeros, kOnes };

struct ParameterSpec {
  std::string name;
  Shape shape;
  Module module;
  Init init;
};

// Parameter list of a config, in declaration order (the checkpoint order).
std::vector<ParameterSpec> parameter_layout(const ModelConfig& config);

template <typename Real>
using Parameters = std::vector<Tensor<Real>>;

template <typename Real>
struct FeatureMaps {
  Tensor<Real> early_tokens;  // T_s: [N_s x d_s]
  Tensor<Real> late_tokens;   // T_l: [N_l x d_l]
  std::array<std::size_t, 3> early_grid;
  std::array<std::size_t, 3> late_grid;

  // Channel-first views F_s: [d_s x D_s x H_s x W_s], F_l likewise.
  Tensor<Real> early_map() const;
  Tensor<Real> late_map() const;
};

template <typename Real>
struct AttentionArtifacts {
  Tensor<Real> head_weights;  // A: [n_heads x N_s]
  Tensor<Real> map;           // A_s: [1 x D x H x W], unit sum
  Tensor<Real> pooled;        // early class-token output [1 x d_s]
};

template <typename Real>
struct ForwardResult {
  Tensor<Real> logits;         // [1 x 2]
  Tensor<Real> probabilities;  // [1 x 2]
  Tensor<Real> late_summary;   // z_cls: [1 x d_l]
  std::optional<AttentionArtifacts<Real>> attention;  // stages 2 and 3
};

// Imaging encoder, early/late class-token attention, clinical projector and
// linear head. Parameters live outside the network so the same code runs on
// constants (inference) or on tape leaves (training, gradient checks).
template <typename Real>
class GuidedAttentionNet {
 public:
  explicit GuidedAttentionNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const std::vector<ParameterSpec>& layout() const { return layout_; }

  Parameters<Real> init_parameters() const;
  // Fresh values for every parameter of `module`, drawn from `seed`.
  void reinitialize(Parameters<Real>& params, Module module, std::uint64_t seed) const;
  // Indices of parameters that receive gradients in `stage`.
  std::vector<std::size_t> active_parameters(Stage stage) const;

  FeatureMaps<Real> encode(std::span<const Tensor<Real>> params, const Tensor<Real>& volume) const;
  AttentionArtifacts<Real> early_attention(std::span<const Tensor<Real>> params,
                                           const FeatureMaps<Real>& features) const;
  // z_cls = MHA(t_cls + delta, T_l, T_l); delta may be null.
  Tensor<Real> late_attention(std::span<const Tensor<Real>> params, const Tensor<Real>& late_tokens,
                              const Tensor<Real>* delta) const;
  Tensor<Real> project_clinical(std::span<const Tensor<Real>> params, const Tensor<Real>& clinical) const;
  Tensor<Real> classify(std::span<const Tensor<Real>> params, const Tensor<Real>& summary) const;

  ForwardResult<Real> forward(std::span<const Tensor<Real>> params, const Tensor<Real>& volume,
                              const Tensor<Real>* clinical, Stage stage) const;

  // Parameter groups used by the pooling modules.
  AttentionWeights<Real> early_weights(std::span<const Tensor<Real>> params) const;
  AttentionWeights<Real> late_weights(std::span<const Tensor<Real>> params) const;
  const Tensor<Real>& early_class_token(std::span<const Tensor<Real>> params) const;
  const Tensor<Real>& late_class_token(std::span<const Tensor<Real>> params) const;
  std::size_t index_of(const std::string& name) const;

 private:
  struct BlockIndex {
    std::size_t ln1_g, ln1_b, qkv_w, qkv_b, out_w, out_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
  };
  struct PoolIndex {
    std::size_t cls, q_w, q_b, k_w, k_b, v_w, v_b, out_w, out_b;
  };

  Tensor<Real> run_block(std::span<const Tensor<Real>> params, const Tensor<Real>& x, const BlockIndex& b) const;
  void check_params(std::span<const Tensor<Real>> params) const;

  ModelConfig config_;
  std::vector<ParameterSpec> layout_;
  std::size_t pe_w_, pe_b_, pos_early_, norm1_g_, norm1_b_;
  std::size_t merge_norm_g_, merge_norm_b_, merge_w_, merge_b_, pos_late_, norm2_g_, norm2_b_;
  std::vector<BlockIndex> stage1_, stage2_;
  PoolIndex early_, late_;
  std::size_t clin_w_, clin_b_, head_w_, head_b_;
};

}  // namespace guided_attn::model
