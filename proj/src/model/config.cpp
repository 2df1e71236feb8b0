#include "guided_attn/model/config.hpp"

#include "guided_attn/common/errors.hpp"

namespace guided_attn::model {

Stage stage_from_int(int value) {
  if (value < 1 || value > 3) throw UsageError("stage must be 1, 2 or 3, got " + std::to_string(value));
  return static_cast<Stage>(value);
}

void ModelConfig::validate() const {
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch[a] == 0 || input[a + 1] % patch[a] != 0) {
      throw UsageError("input extents must be divisible by the patch size");
    }
    if ((input[a + 1] / patch[a]) % 2 != 0) {
      throw UsageError("patch grid must be divisible by the 2x merge factor on every axis");
    }
  }
  if (input[0] == 0) throw UsageError("input must have at least one channel");
  if (n_heads == 0 || early_dim % n_heads != 0 || late_dim % n_heads != 0) {
    throw UsageError("n_heads must divide both early_dim and late_dim");
  }
  if (blocks_per_stage == 0 || mlp_ratio == 0) throw UsageError("blocks_per_stage and mlp_ratio must be positive");
  if (clinical_dim == 0) throw UsageError("clinical_dim must be positive");
}

std::array<std::size_t, 3> ModelConfig::early_grid() const {
  return {input[1] / patch[0], input[2] / patch[1], input[3] / patch[2]};
}

std::array<std::size_t, 3> ModelConfig::late_grid() const {
  auto g = early_grid();
  return {g[0] / 2, g[1] / 2, g[2] / 2};
}

std::size_t ModelConfig::early_tokens() const {
  auto g = early_grid();
  return g[0] * g[1] * g[2];
}

std::size_t ModelConfig::late_tokens() const {
  auto g = late_grid();
  return g[0] * g[1] * g[2];
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input", c.input},
                     {"patch", c.patch},
                     {"early_dim", c.early_dim},
                     {"late_dim", c.late_dim},
                     {"blocks_per_stage", c.blocks_per_stage},
                     {"n_heads", c.n_heads},
                     {"mlp_ratio", c.mlp_ratio},
                     {"clinical_dim", c.clinical_dim},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.input = j.value("input", d.input);
  c.patch = j.value("patch", d.patch);
  c.early_dim = j.value("early_dim", d.early_dim);
  c.late_dim = j.value("late_dim", d.late_dim);
  c.blocks_per_stage = j.value("blocks_per_stage", d.blocks_per_stage);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.clinical_dim = j.value("clinical_dim", d.clinical_dim);
  c.seed = j.value("seed", d.seed);
}

}  // namespace guided_attn::model
