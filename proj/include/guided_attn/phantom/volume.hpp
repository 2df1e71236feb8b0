#pragma once

#include <array>
#include <optional>
#include <string>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::phantom {

using Spacing = std::array<double, 3>;  // mm along (D, H, W)
using Extent = std::array<std::size_t, 3>;

enum class Orientation { kAxial, kSagittal };
enum class Laterality { kUnilateral, kBilateral };

std::string to_string(Orientation o);
std::string to_string(Laterality l);
Orientation orientation_from_string(const std::string& s);
Laterality laterality_from_string(const std::string& s);

// Multi-phase intensity grid [C x D x H x W]. Sagittal volumes store their
// spatial axes in (W, H, D) order; spacing follows the stored axis order.
struct Volume {
  numcore::Tensor<float> data;
  Spacing spacing{1.0, 1.0, 1.0};
  Orientation orientation = Orientation::kAxial;
  Laterality laterality = Laterality::kUnilateral;
  // Pre-contrast acquisition [1 x D x H x W], present on raw phantom series.
  std::optional<numcore::Tensor<float>> baseline;

  std::size_t channels() const { return data.dim(0); }
  Extent extent() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
};

enum class Provenance { kExpert, kSynthetic };

// Binary grid [1 x D x H x W] holding 0 or 1.
struct Mask {
  numcore::Tensor<float> data;
  Provenance provenance = Provenance::kSynthetic;

  Extent extent() const { return {data.dim(1), data.dim(2), data.dim(3)}; }
  std::size_t voxel_count() const;
};

// Number of 6-connected foreground components.
std::size_t connected_components(const Mask& mask);

// Exchanges the first and last spatial axes of [C x A x B x E]; converts
// between axial (D, H, W) and sagittal (W, H, D) storage in both directions.
numcore::Tensor<float> swap_depth_width(const numcore::Tensor<float>& x);

// Mean voxel coordinate of the foreground; throws DataError when empty.
std::array<double, 3> mask_centroid(const Mask& mask);

}  // namespace guided_attn::phantom
