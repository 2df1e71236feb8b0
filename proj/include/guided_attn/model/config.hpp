#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

namespace guided_attn::model {

// Training steps. Step 1 trains the late pathway only, step 2 adds the
// supervised early attention, step 3 adds clinical modulation.
enum class Stage : int { kGlobal = 1, kGuided = 2, kClinical = 3 };

Stage stage_from_int(int value);
inline int to_int(Stage s) { return static_cast<int>(s); }

struct ModelConfig {
  std::array<std::size_t, 4> input{3, 16, 32, 32};  // C, D, H, W
  std::array<std::size_t, 3> patch{2, 4, 4};
  std::size_t early_dim = 32;
  std::size_t late_dim = 64;
  std::size_t blocks_per_stage = 2;
  std::size_t n_heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t clinical_dim = 17;
  std::uint64_t seed = 0;

  // Throws UsageError on indivisible extents or widths.
  void validate() const;

  std::array<std::size_t, 3> early_grid() const;
  std::array<std::size_t, 3> late_grid() const;
  std::size_t early_tokens() const;
  std::size_t late_tokens() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

}  // namespace guided_attn::model
