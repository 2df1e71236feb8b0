#pragma once

#include <array>
#include <span>
#include <utility>

#include <nlohmann/json.hpp>

#include "guided_attn/phantom/volume.hpp"

namespace guided_attn::phantom {

struct GeometryConfig {
  Extent crop{16, 32, 32};
  Spacing target_spacing{2.0, 0.7, 0.7};
};

struct IntensityConfig {
  // Flat-field smoothing width as a fraction of each extent.
  double flat_field_fraction = 0.25;
  // Added to the mean-normalized smooth field before division.
  double flat_field_eps = 0.05;
  double low_percentile = 1.0;
  double high_percentile = 99.0;
};

struct PipelineConfig {
  GeometryConfig geometry;
  IntensityConfig intensity;
};

// Picks (early, peak, washout) phase indices from a mean intensity curve.
// Early is the first phase, washout the last, peak the first argmax. When the
// peak collides with an end slot the peak is kept and the colliding slot takes
// the nearest unused phase, preferring the later one on ties.
std::array<std::size_t, 3> select_phase_indices(std::span<const double> curve);

// Mean intensity per phase over the breast region (baseline, or the first
// phase when no baseline is present, above a quarter of its maximum).
std::vector<double> breast_curve(const Volume& series);

Volume select_phases(const Volume& series);

// Sagittal to axial, bilateral to the tumor side, resampling to the target
// spacing and centre crop/pad. Throws DataError for empty masks.
std::pair<Volume, Mask> standardize_geometry(const Volume& v, const Mask& m, const GeometryConfig& cfg);

// Divides by a heavily smoothed, mean-normalized copy of itself.
numcore::Tensor<float> flat_field(const numcore::Tensor<float>& x, const IntensityConfig& cfg);

// Per-volume percentile clip followed by a linear map to [0, 1]. A volume
// whose percentiles agree to 1e-5 relative maps to zeros and logs a warning.
numcore::Tensor<float> clip_and_rescale(const numcore::Tensor<float>& x, double low_pct, double high_pct);

// Linear-interpolated percentile (0..100) of the values.
double percentile(std::vector<float> values, double pct);

// Baseline subtraction (negatives clamped), flat-field, clip and rescale.
Volume normalize_intensity(const Volume& v, const IntensityConfig& cfg);

void to_json(nlohmann::json& j, const GeometryConfig& c);
void from_json(const nlohmann::json& j, GeometryConfig& c);
void to_json(nlohmann::json& j, const IntensityConfig& c);
void from_json(const nlohmann::json& j, IntensityConfig& c);
void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

}  // namespace guided_attn::phantom
