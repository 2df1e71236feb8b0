#pragma once

#include <cstddef>
#include <span>

#include <nlohmann/json.hpp>

#include "guided_attn/numcore/tensor.hpp"

namespace guided_attn::eval {

struct MetricsRow {
  double spe = 0.0;
  double sens = 0.0;
  double ba = 0.0;
  double auc = 0.0;
  double threshold = 0.5;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

// Spe, Sens and BA at `threshold` (positive iff score >= threshold). Leaves
// auc at 0. Throws DataError unless both classes are present.
MetricsRow confusion_metrics(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

// Mann-Whitney AUC with ties counted one half.
double auc(std::span<const double> scores, std::span<const int> labels);

// confusion_metrics plus auc.
MetricsRow evaluate_scores(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

// Decimal rounding with exact halves going down, e.g. 0.625 -> 0.62 and
// 0.335 -> 0.33. This is the rounding convention of the reference results table.
double round_half_down(double value, int decimals);

// Sum of A over the mask, optionally after dilating the mask by a ball of
// `dilation_radius` voxels. A and mask are [1 x D x H x W].
double attention_mass_in_mask(const numcore::Tensor<float>& attention, const numcore::Tensor<float>& mask,
                              double dilation_radius = 0.0);

// (p_img + p_cl) / 2; both inputs must lie in [0, 1].
double fuse_late(double p_img, double p_cl);

void to_json(nlohmann::json& j, const MetricsRow& m);

}  // namespace guided_attn::eval
