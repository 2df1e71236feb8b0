#include "guided_attn/model/network.hpp"

#include <algorithm>
#include <random>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"
#include "guided_attn/numcore/ops.hpp"
#include "guided_attn/numcore/signal.hpp"

namespace guided_attn::model {

namespace nc = numcore;

namespace {

constexpr double kInitStd = 0.02;

void add_block(std::vector<ParameterSpec>& out, const std::string& prefix, std::size_t d, std::size_t ratio) {
  const std::size_t hidden = d * ratio;
  out.push_back({prefix + ".ln1.gain", {d}, Module::kEncoder, Init::kOnes});
  out.push_back({prefix + ".ln1.bias", {d}, Module::kEncoder, Init::kZeros});
  out.push_back({prefix + ".attn.qkv.weight", {d, 3 * d}, Module::kEncoder, Init::kTruncNormal});
  out.push_back({prefix + ".attn.qkv.bias", {3 * d}, Module::kEncoder, Init::kZeros});
  out.push_back({prefix + ".attn.out.weight", {d, d}, Module::kEncoder, Init::kTruncNormal});
  out.push_back({prefix + ".attn.out.bias", {d}, Module::kEncoder, Init::kZeros});
  out.push_back({prefix + ".ln2.gain", {d}, Module::kEncoder, Init::kOnes});
  out.push_back({prefix + ".ln2.bias", {d}, Module::kEncoder, Init::kZeros});
  out.push_back({prefix + ".mlp.fc1.weight", {d, hidden}, Module::kEncoder, Init::kTruncNormal});
  out.push_back({prefix + ".mlp.fc1.bias", {hidden}, Module::kEncoder, Init::kZeros});
  out.push_back({prefix + ".mlp.fc2.weight", {hidden, d}, Module::kEncoder, Init::kTruncNormal});
  out.push_back({prefix + ".mlp.fc2.bias", {d}, Module::kEncoder, Init::kZeros});
}

void add_pool(std::vector<ParameterSpec>& out, const std::string& prefix, std::size_t d, Module m) {
  out.push_back({prefix + ".class_token", {1, d}, m, Init::kZeros});
  for (const char* p : {"q", "k", "v", "out"}) {
    out.push_back({prefix + "." + p + ".weight", {d, d}, m, Init::kTruncNormal});
    out.push_back({prefix + "." + p + ".bias", {d}, m, Init::kZeros});
  }
}

template <typename Real>
Tensor<Real> init_tensor(const ParameterSpec& spec, std::uint64_t seed) {
  std::vector<Real> values(nc::shape_numel(spec.shape));
  switch (spec.init) {
    case Init::kZeros:
      break;
    case Init::kOnes:
      std::fill(values.begin(), values.end(), Real(1));
      break;
    case Init::kTruncNormal: {
      Rng rng(seed);
      std::normal_distribution<double> dist(0.0, kInitStd);
      for (auto& v : values) {
        double x;
        do {
          x = dist(rng);
        } while (std::abs(x) > 2.0 * kInitStd);
        v = static_cast<Real>(x);
      }
      break;
    }
  }
  return Tensor<Real>(spec.shape, std::move(values));
}

}  // namespace

std::vector<ParameterSpec> parameter_layout(const ModelConfig& c) {
  c.validate();
  const std::size_t patch_len = c.input[0] * c.patch[0] * c.patch[1] * c.patch[2];
  std::vector<ParameterSpec> out;
  out.push_back({"encoder.patch_embed.weight", {patch_len, c.early_dim}, Module::kEncoder, Init::kTruncNormal});
  out.push_back({"encoder.patch_embed.bias", {c.early_dim}, Module::kEncoder, Init::kZeros});
  out.push_back({"encoder.pos_early", {c.early_tokens(), c.early_dim}, Module::kEncoder, Init::kTruncNormal});
  for (std::size_t b = 0; b < c.blocks_per_stage; ++b)
    add_block(out, "encoder.stage1.block" + std::to_string(b), c.early_dim, c.mlp_ratio);
  out.push_back({"encoder.stage1.norm.gain", {c.early_dim}, Module::kEncoder, Init::kOnes});
  out.push_back({"encoder.stage1.norm.bias", {c.early_dim}, Module::kEncoder, Init::kZeros});
  out.push_back({"encoder.merge.norm.gain", {8 * c.early_dim}, Module::kEncoder, Init::kOnes});
  out.push_back({"encoder.merge.norm.bias", {8 * c.early_dim}, Module::kEncoder, Init::kZeros});
  out.push_back({"encoder.merge.weight", {8 * c.early_dim, c.late_dim}, Module::kEncoder, Init::kTruncNormal});
  out.push_back({"encoder.merge.bias", {c.late_dim}, Module::kEncoder, Init::kZeros});
  out.push_back({"encoder.pos_late", {c.late_tokens(), c.late_dim}, Module::kEncoder, Init::kTruncNormal});
  for (std::size_t b = 0; b < c.blocks_per_stage; ++b)
    add_block(out, "encoder.stage2.block" + std::to_string(b), c.late_dim, c.mlp_ratio);
  out.push_back({"encoder.stage2.norm.gain", {c.late_dim}, Module::kEncoder, Init::kOnes});
  out.push_back({"encoder.stage2.norm.bias", {c.late_dim}, Module::kEncoder, Init::kZeros});
  add_pool(out, "early_attention", c.early_dim, Module::kEarlyAttention);
  add_pool(out, "late_attention", c.late_dim, Module::kLateAttention);
  out.push_back({"clinical_projector.weight", {c.clinical_dim, c.late_dim}, Module::kClinicalProjector,
                 Init::kTruncNormal});
  out.push_back({"clinical_projector.bias", {c.late_dim}, Module::kClinicalProjector, Init::kZeros});
  out.push_back({"head.weight", {c.late_dim, 2}, Module::kHead, Init::kTruncNormal});
  out.push_back({"head.bias", {2}, Module::kHead, Init::kZeros});
  return out;
}

template <typename Real>
Tensor<Real> FeatureMaps<Real>::early_map() const {
  const auto [d, h, w] = early_grid;
  return nc::reshape(nc::transpose(early_tokens), Shape{early_tokens.dim(1), d, h, w});
}

template <typename Real>
Tensor<Real> FeatureMaps<Real>::late_map() const {
  const auto [d, h, w] = late_grid;
  return nc::reshape(nc::transpose(late_tokens), Shape{late_tokens.dim(1), d, h, w});
}

template <typename Real>
GuidedAttentionNet<Real>::GuidedAttentionNet(ModelConfig config)
    : config_(std::move(config)), layout_(parameter_layout(config_)) {
  pe_w_ = index_of("encoder.patch_embed.weight");
  pe_b_ = index_of("encoder.patch_embed.bias");
  pos_early_ = index_of("encoder.pos_early");
  norm1_g_ = index_of("encoder.stage1.norm.gain");
  norm1_b_ = index_of("encoder.stage1.norm.bias");
  merge_norm_g_ = index_of("encoder.merge.norm.gain");
  merge_norm_b_ = index_of("encoder.merge.norm.bias");
  merge_w_ = index_of("encoder.merge.weight");
  merge_b_ = index_of("encoder.merge.bias");
  pos_late_ = index_of("encoder.pos_late");
  norm2_g_ = index_of("encoder.stage2.norm.gain");
  norm2_b_ = index_of("encoder.stage2.norm.bias");
  auto block = [this](const std::string& p) {
    return BlockIndex{index_of(p + ".ln1.gain"),       index_of(p + ".ln1.bias"),
                      index_of(p + ".attn.qkv.weight"), index_of(p + ".attn.qkv.bias"),
                      index_of(p + ".attn.out.weight"), index_of(p + ".attn.out.bias"),
                      index_of(p + ".ln2.gain"),       index_of(p + ".ln2.bias"),
                      index_of(p + ".mlp.fc1.weight"),  index_of(p + ".mlp.fc1.bias"),
                      index_of(p + ".mlp.fc2.weight"),  index_of(p + ".mlp.fc2.bias")};
  };
  for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
    stage1_.push_back(block("encoder.stage1.block" + std::to_string(b)));
    stage2_.push_back(block("encoder.stage2.block" + std::to_string(b)));
  }
  auto pool = [this](const std::string& p) {
    return PoolIndex{index_of(p + ".class_token"), index_of(p + ".q.weight"),   index_of(p + ".q.bias"),
                     index_of(p + ".k.weight"),    index_of(p + ".k.bias"),     index_of(p + ".v.weight"),
                     index_of(p + ".v.bias"),      index_of(p + ".out.weight"), index_of(p + ".out.bias")};
  };
  early_ = pool("early_attention");
  late_ = pool("late_attention");
  clin_w_ = index_of("clinical_projector.weight");
  clin_b_ = index_of("clinical_projector.bias");
  head_w_ = index_of("head.weight");
  head_b_ = index_of("head.bias");
}

template <typename Real>
std::size_t GuidedAttentionNet<Real>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].name == name) return i;
  throw UsageError("unknown parameter " + name);
}

template <typename Real>
Parameters<Real> GuidedAttentionNet<Real>::init_parameters() const {
  Parameters<Real> params;
  params.reserve(layout_.size());
  for (std::size_t i = 0; i < layout_.size(); ++i)
    params.push_back(init_tensor<Real>(layout_[i], derive_seed(config_.seed, {i})));
  return params;
}

template <typename Real>
void GuidedAttentionNet<Real>::reinitialize(Parameters<Real>& params, Module module, std::uint64_t seed) const {
  check_params(params);
  for (std::size_t i = 0; i < layout_.size(); ++i)
    if (layout_[i].module == module) params[i] = init_tensor<Real>(layout_[i], derive_seed(seed, {i}));
}

template <typename Real>
std::vector<std::size_t> GuidedAttentionNet<Real>::active_parameters(Stage stage) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const Module m = layout_[i].module;
    const bool active = m == Module::kEncoder || m == Module::kLateAttention || m == Module::kHead ||
                        (m == Module::kEarlyAttention && stage != Stage::kGlobal) ||
                        (m == Module::kClinicalProjector && stage == Stage::kClinical);
    if (active) out.push_back(i);
  }
  return out;
}

template <typename Real>
void GuidedAttentionNet<Real>::check_params(std::span<const Tensor<Real>> params) const {
  if (params.size() != layout_.size()) {
    throw UsageError("expected " + std::to_string(layout_.size()) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i].shape() != layout_[i].shape) {
      throw UsageError("parameter " + layout_[i].name + " has shape " + nc::shape_to_string(params[i].shape()) +
                       ", expected " + nc::shape_to_string(layout_[i].shape));
    }
}

template <typename Real>
Tensor<Real> GuidedAttentionNet<Real>::run_block(std::span<const Tensor<Real>> p, const Tensor<Real>& x,
                                                 const BlockIndex& b) const {
  auto h = nc::layer_norm(x, p[b.ln1_g], p[b.ln1_b]);
  auto y = nc::add(x, self_attention(h, p[b.qkv_w], p[b.qkv_b], p[b.out_w], p[b.out_b], config_.n_heads));
  auto m = nc::layer_norm(y, p[b.ln2_g], p[b.ln2_b]);
  auto hidden = nc::gelu(nc::add_bias(nc::matmul(m, p[b.fc1_w]), p[b.fc1_b]));
  return nc::add(y, nc::add_bias(nc::matmul(hidden, p[b.fc2_w]), p[b.fc2_b]));
}

template <typename Real>
FeatureMaps<Real> GuidedAttentionNet<Real>::encode(std::span<const Tensor<Real>> p, const Tensor<Real>& volume) const {
  check_params(p);
  const Shape expected{config_.input[0], config_.input[1], config_.input[2], config_.input[3]};
  if (volume.shape() != expected) {
    throw UsageError("encode: volume shape " + nc::shape_to_string(volume.shape()) + " differs from configured " +
                     nc::shape_to_string(expected));
  }
  auto x = nc::add(nc::add_bias(nc::matmul(nc::patchify(volume, config_.patch), p[pe_w_]), p[pe_b_]), p[pos_early_]);
  for (const auto& b : stage1_) x = run_block(p, x, b);
  FeatureMaps<Real> fm;
  fm.early_grid = config_.early_grid();
  fm.late_grid = config_.late_grid();
  fm.early_tokens = nc::layer_norm(x, p[norm1_g_], p[norm1_b_]);

  const auto [gd, gh, gw] = fm.early_grid;
  auto grid = nc::reshape(nc::transpose(x), Shape{config_.early_dim, gd, gh, gw});
  auto merged = nc::patchify(grid, {2, 2, 2});  // [N_l x 8 d_s]
  merged = nc::layer_norm(merged, p[merge_norm_g_], p[merge_norm_b_]);
  auto y = nc::add(nc::add_bias(nc::matmul(merged, p[merge_w_]), p[merge_b_]), p[pos_late_]);
  for (const auto& b : stage2_) y = run_block(p, y, b);
  fm.late_tokens = nc::layer_norm(y, p[norm2_g_], p[norm2_b_]);
  return fm;
}

template <typename Real>
AttentionWeights<Real> GuidedAttentionNet<Real>::early_weights(std::span<const Tensor<Real>> p) const {
  return {p[early_.q_w], p[early_.q_b], p[early_.k_w], p[early_.k_b],
          p[early_.v_w], p[early_.v_b], p[early_.out_w], p[early_.out_b]};
}

template <typename Real>
AttentionWeights<Real> GuidedAttentionNet<Real>::late_weights(std::span<const Tensor<Real>> p) const {
  return {p[late_.q_w], p[late_.q_b], p[late_.k_w], p[late_.k_b],
          p[late_.v_w], p[late_.v_b], p[late_.out_w], p[late_.out_b]};
}

template <typename Real>
const Tensor<Real>& GuidedAttentionNet<Real>::early_class_token(std::span<const Tensor<Real>> p) const {
  return p[early_.cls];
}

template <typename Real>
const Tensor<Real>& GuidedAttentionNet<Real>::late_class_token(std::span<const Tensor<Real>> p) const {
  return p[late_.cls];
}

template <typename Real>
AttentionArtifacts<Real> GuidedAttentionNet<Real>::early_attention(std::span<const Tensor<Real>> p,
                                                                   const FeatureMaps<Real>& fm) const {
  auto pooled = attention_pool(p[early_.cls], fm.early_tokens, early_weights(p), config_.n_heads);
  const auto [gd, gh, gw] = fm.early_grid;
  auto averaged = nc::reshape(nc::mean_rows(pooled.weights), Shape{1, gd, gh, gw});
  auto upsampled = nc::resample_trilinear(averaged, {config_.input[1], config_.input[2], config_.input[3]});
  return {pooled.weights, nc::normalize_sum(upsampled), pooled.output};
}

template <typename Real>
Tensor<Real> GuidedAttentionNet<Real>::late_attention(std::span<const Tensor<Real>> p, const Tensor<Real>& tokens,
                                                      const Tensor<Real>* delta) const {
  Tensor<Real> query = p[late_.cls];
  if (delta != nullptr) {
    if (delta->numel() != config_.late_dim) {
      throw UsageError("late_attention: clinical embedding has " + std::to_string(delta->numel()) +
                       " values, expected " + std::to_string(config_.late_dim));
    }
    query = nc::add(query, nc::reshape(*delta, Shape{1, config_.late_dim}));
  }
  return attention_pool(query, tokens, late_weights(p), config_.n_heads).output;
}

template <typename Real>
Tensor<Real> GuidedAttentionNet<Real>::project_clinical(std::span<const Tensor<Real>> p,
                                                        const Tensor<Real>& clinical) const {
  if (clinical.numel() != config_.clinical_dim) {
    throw UsageError("project_clinical: clinical vector has " + std::to_string(clinical.numel()) +
                     " values, expected " + std::to_string(config_.clinical_dim));
  }
  auto row = nc::reshape(clinical, Shape{1, config_.clinical_dim});
  return nc::add_bias(nc::matmul(row, p[clin_w_]), p[clin_b_]);
}

template <typename Real>
Tensor<Real> GuidedAttentionNet<Real>::classify(std::span<const Tensor<Real>> p, const Tensor<Real>& summary) const {
  return nc::add_bias(nc::matmul(summary, p[head_w_]), p[head_b_]);
}

template <typename Real>
ForwardResult<Real> GuidedAttentionNet<Real>::forward(std::span<const Tensor<Real>> p, const Tensor<Real>& volume,
                                                      const Tensor<Real>* clinical, Stage stage) const {
  if (stage == Stage::kClinical && clinical == nullptr) {
    throw UsageError("forward: step 3 requires a clinical vector");
  }
  auto fm = encode(p, volume);
  ForwardResult<Real> out;
  if (stage == Stage::kClinical) {
    auto delta = project_clinical(p, *clinical);
    out.late_summary = late_attention(p, fm.late_tokens, &delta);
  } else {
    out.late_summary = late_attention(p, fm.late_tokens, nullptr);
  }
  out.logits = classify(p, out.late_summary);
  out.probabilities = nc::softmax(out.logits, 1);
  if (stage != Stage::kGlobal) out.attention = early_attention(p, fm);
  return out;
}

template struct FeatureMaps<float>;
template struct FeatureMaps<double>;
template class GuidedAttentionNet<float>;
template class GuidedAttentionNet<double>;

}  // namespace guided_attn::model
