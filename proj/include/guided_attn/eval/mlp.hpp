#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::eval {

using TensorF = numcore::Tensor<float>;

struct MlpConfig {
  std::size_t hidden = 32;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  std::size_t max_epochs = 300;
  std::size_t patience = 20;
  std::size_t batch_size = 8;
};

// One hidden GELU layer and a two-way softmax head.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t inputs, std::size_t hidden, std::uint64_t seed);

  std::size_t inputs() const { return inputs_; }
  const std::vector<TensorF>& parameters() const { return params_; }
  std::vector<TensorF>& parameters() { return params_; }

  // Logits [N x 2] for features [N x inputs]; params may be tape leaves.
  TensorF logits(std::span<const TensorF> params, const TensorF& features) const;
  // P(label = 1) per row.
  std::vector<double> predict(const TensorF& features) const;

 private:
  std::size_t inputs_ = 0;
  std::vector<TensorF> params_;  // w1 [F x H], b1 [H], w2 [H x 2], b2 [2]
};

struct MlpFit {
  Mlp model;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::size_t epochs = 0;
};

// Adam with cross-entropy and early stopping on the validation loss; the
// returned model holds the best-validation parameters.
MlpFit train_mlp(const TensorF& train_x, std::span<const int> train_y, const TensorF& val_x,
                 std::span<const int> val_y, const MlpConfig& cfg, std::uint64_t seed);

// Row-wise concatenation [a | b] of two feature matrices.
TensorF concat_features(const TensorF& a, const TensorF& b);

void to_json(nlohmann::json& j, const MlpConfig& c);
void from_json(const nlohmann::json& j, MlpConfig& c);

}  // namespace guided_attn::eval
