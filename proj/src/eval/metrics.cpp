#include "guided_attn/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::eval {

namespace {

void check_inputs(std::span<const double> scores, std::span<const int> labels, std::size_t& n_pos,
                  std::size_t& n_neg) {
  if (scores.size() != labels.size()) throw UsageError("metrics: one label per score required");
  n_pos = n_neg = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("metrics: labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw NumericalError("metrics: non-finite score");
    (labels[i] == 1 ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("metrics: both classes are required");
}

}  // namespace

MetricsRow confusion_metrics(std::span<const double> scores, std::span<const int> labels, double threshold) {
  MetricsRow row;
  check_inputs(scores, labels, row.n_pos, row.n_neg);
  std::size_t tp = 0, tn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool positive = scores[i] >= threshold;
    if (labels[i] == 1 && positive) ++tp;
    if (labels[i] == 0 && !positive) ++tn;
  }
  row.threshold = threshold;
  row.sens = static_cast<double>(tp) / static_cast<double>(row.n_pos);
  row.spe = static_cast<double>(tn) / static_cast<double>(row.n_neg);
  row.ba = (row.spe + row.sens) / 2.0;
  return row;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  std::size_t n_pos = 0, n_neg = 0;
  check_inputs(scores, labels, n_pos, n_neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the positive rank sum, so tied midranks stay integral.
  std::size_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::size_t pos_in_run = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) pos_in_run += labels[order[j++]] == 1;
    twice_rank_sum += pos_in_run * (i + 1 + j);
    i = j;
  }
  const std::size_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return static_cast<double>(twice_u) / 2.0 / static_cast<double>(n_pos * n_neg);
}

MetricsRow evaluate_scores(std::span<const double> scores, std::span<const int> labels, double threshold) {
  MetricsRow row = confusion_metrics(scores, labels, threshold);
  row.auc = auc(scores, labels);
  return row;
}

double round_half_down(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double scaled = value * scale;
  // The tolerance absorbs binary representation error of decimal halves.
  // Adding 0.0 turns a -0.0 result into +0.0.
  return std::ceil(scaled - 0.5 - 1e-9) / scale + 0.0;
}

double attention_mass_in_mask(const numcore::Tensor<float>& attention, const numcore::Tensor<float>& mask,
                              double dilation_radius) {
  if (attention.shape() != mask.shape() || mask.rank() != 4 || mask.dim(0) != 1) {
    throw UsageError("attention_mass_in_mask: attention and mask must both be [1 x D x H x W]");
  }
  const std::size_t d = mask.dim(1), h = mask.dim(2), w = mask.dim(3);
  std::vector<std::uint8_t> region(mask.numel());
  std::size_t count = 0;
  for (std::size_t i = 0; i < region.size(); ++i) count += region[i] = mask[i] > 0.5f;
  if (count == 0) throw DataError("attention_mass_in_mask: empty mask");
  if (dilation_radius > 0.0) {
    const auto r = static_cast<long>(std::floor(dilation_radius));
    const double r2 = dilation_radius * dilation_radius;
    std::vector<std::uint8_t> grown(region.size(), 0);
    for (std::size_t z = 0; z < d; ++z)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          if (!region[(z * h + y) * w + x]) continue;
          for (long dz = -r; dz <= r; ++dz)
            for (long dy = -r; dy <= r; ++dy)
              for (long dx = -r; dx <= r; ++dx) {
                if (static_cast<double>(dz * dz + dy * dy + dx * dx) > r2) continue;
                const long zz = static_cast<long>(z) + dz, yy = static_cast<long>(y) + dy,
                           xx = static_cast<long>(x) + dx;
                if (zz < 0 || yy < 0 || xx < 0 || zz >= long(d) || yy >= long(h) || xx >= long(w)) continue;
                grown[(std::size_t(zz) * h + std::size_t(yy)) * w + std::size_t(xx)] = 1;
              }
        }
    region = std::move(grown);
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (region[i]) mass += attention[i];
  }
  return mass;
}

double fuse_late(double p_img, double p_cl) {
  if (!(p_img >= 0.0 && p_img <= 1.0) || !(p_cl >= 0.0 && p_cl <= 1.0)) {
    throw UsageError("fuse_late: probabilities must lie in [0, 1]");
  }
  return (p_img + p_cl) / 2.0;
}

void to_json(nlohmann::json& j, const MetricsRow& m) {
  j = {{"spe", m.spe},        {"sens", m.sens},   {"ba", m.ba},      {"auc", m.auc},
       {"threshold", m.threshold}, {"n_pos", m.n_pos}, {"n_neg", m.n_neg}};
}

}  // namespace guided_attn::eval
