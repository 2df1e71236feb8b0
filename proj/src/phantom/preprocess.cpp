#include "guided_attn/phantom/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/numcore/signal.hpp"

namespace guided_attn::phantom {

namespace nc = numcore;
using TensorF = nc::Tensor<float>;

std::array<std::size_t, 3> select_phase_indices(std::span<const double> curve) {
  const std::size_t c = curve.size();
  if (c < 3) throw DataError("select_phases needs at least 3 post-contrast phases, got " + std::to_string(c));
  const std::size_t peak = static_cast<std::size_t>(std::max_element(curve.begin(), curve.end()) - curve.begin());
  std::size_t early = 0, washout = c - 1;
  auto nearest_unused = [&](std::size_t from, std::size_t a, std::size_t b) {
    for (std::size_t d = 1; d < c; ++d) {
      if (from + d < c && from + d != a && from + d != b) return from + d;
      if (from >= d && from - d != a && from - d != b) return from - d;
    }
    throw DataError("select_phases: no distinct phase available");
  };
  if (peak == early) early = nearest_unused(peak, peak, washout);
  if (peak == washout) washout = nearest_unused(peak, peak, early);
  return {early, peak, washout};
}

std::vector<double> breast_curve(const Volume& series) {
  const auto [d, h, w] = series.extent();
  const std::size_t n = d * h * w;
  const auto ref = series.baseline ? series.baseline->data() : series.data.data().subspan(0, n);
  const float peak = *std::max_element(ref.begin(), ref.end());
  std::vector<char> region(n);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    region[i] = peak > 0.0f ? ref[i] > 0.25f * peak : 1;
    count += region[i];
  }
  std::vector<double> curve(series.channels(), 0.0);
  for (std::size_t c = 0; c < series.channels(); ++c) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (region[i]) sum += series.data[c * n + i];
    curve[c] = sum / static_cast<double>(count);
  }
  return curve;
}

Volume select_phases(const Volume& series) {
  if (series.data.rank() != 4) throw DataError("select_phases expects a [C x D x H x W] series");
  const auto idx = select_phase_indices(breast_curve(series));
  const auto [d, h, w] = series.extent();
  const std::size_t n = d * h * w;
  std::vector<float> out;
  out.reserve(3 * n);
  for (std::size_t k : idx) {
    const auto src = series.data.data().subspan(k * n, n);
    out.insert(out.end(), src.begin(), src.end());
  }
  Volume v = series;
  v.data = TensorF({3, d, h, w}, std::move(out));
  return v;
}

namespace {

TensorF slice_width(const TensorF& x, std::size_t start, std::size_t width) {
  const std::size_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<float> out;
  out.reserve(c * d * h * width);
  for (std::size_t row = 0; row < c * d * h; ++row) {
    const auto src = x.data().subspan(row * w + start, width);
    out.insert(out.end(), src.begin(), src.end());
  }
  return TensorF({c, d, h, width}, std::move(out));
}

// Centre crop or zero pad every spatial axis to `target`.
TensorF crop_or_pad(const TensorF& x, const Extent& target) {
  const std::size_t c = x.dim(0);
  const Extent src{x.dim(1), x.dim(2), x.dim(3)};
  std::array<std::ptrdiff_t, 3> shift{};
  for (std::size_t a = 0; a < 3; ++a) {
    shift[a] = (static_cast<std::ptrdiff_t>(src[a]) - static_cast<std::ptrdiff_t>(target[a])) / 2;
  }
  std::vector<float> out(c * target[0] * target[1] * target[2], 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t z = 0; z < target[0]; ++z) {
      const std::ptrdiff_t sz = static_cast<std::ptrdiff_t>(z) + shift[0];
      if (sz < 0 || sz >= static_cast<std::ptrdiff_t>(src[0])) continue;
      for (std::size_t y = 0; y < target[1]; ++y) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + shift[1];
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(src[1])) continue;
        for (std::size_t xx = 0; xx < target[2]; ++xx) {
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx) + shift[2];
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(src[2])) continue;
          out[((ch * target[0] + z) * target[1] + y) * target[2] + xx] =
              x[((ch * src[0] + sz) * src[1] + sy) * src[2] + sx];
        }
      }
    }
  return TensorF({c, target[0], target[1], target[2]}, std::move(out));
}

TensorF binarize(const TensorF& x) {
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.5f ? 1.0f : 0.0f;
  return TensorF(x.shape(), std::move(out));
}

}  // namespace

std::pair<Volume, Mask> standardize_geometry(const Volume& v, const Mask& m, const GeometryConfig& cfg) {
  if (m.extent() != v.extent()) throw DataError("mask is not aligned with the volume");
  if (m.voxel_count() == 0) throw DataError("standardize_geometry: empty mask");
  TensorF data = v.data, mask = m.data;
  std::optional<TensorF> baseline = v.baseline;
  Spacing spacing = v.spacing;

  if (v.orientation == Orientation::kSagittal) {
    data = swap_depth_width(data);
    mask = swap_depth_width(mask);
    if (baseline) baseline = swap_depth_width(*baseline);
    std::swap(spacing[0], spacing[2]);
  }

  if (v.laterality == Laterality::kBilateral) {
    const std::size_t w = data.dim(3), half = w / 2;
    const Mask axial_mask{mask, m.provenance};
    const double cx = mask_centroid(axial_mask)[2];
    const double midline = (static_cast<double>(w) - 1.0) / 2.0;
    bool keep_left = cx < midline;
    if (cx == midline) {
      double left = 0, right = 0;
      const auto vals = mask.data();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        if (vals[i] <= 0.5f) continue;
        const std::size_t x = i % w;
        if (x < half) left += 1;
        if (x >= w - half) right += 1;
      }
      keep_left = left >= right;
    }
    const std::size_t start = keep_left ? 0 : w - half;
    data = slice_width(data, start, half);
    mask = slice_width(mask, start, half);
    if (baseline) baseline = slice_width(*baseline, start, half);
  }

  Extent resampled{};
  bool same = true;
  for (std::size_t a = 0; a < 3; ++a) {
    const double n = static_cast<double>(data.dim(a + 1));
    resampled[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * spacing[a] / cfg.target_spacing[a])));
    same = same && resampled[a] == data.dim(a + 1);
  }
  if (!same) {
    data = nc::resample_trilinear(data, resampled);
    mask = binarize(nc::resample_nearest(mask, resampled));
    if (baseline) baseline = nc::resample_trilinear(*baseline, resampled);
  }

  Volume out;
  out.data = crop_or_pad(data, cfg.crop);
  if (baseline) out.baseline = crop_or_pad(*baseline, cfg.crop);
  out.spacing = cfg.target_spacing;
  out.orientation = Orientation::kAxial;
  out.laterality = Laterality::kUnilateral;
  Mask out_mask{binarize(crop_or_pad(mask, cfg.crop)), m.provenance};
  if (out_mask.voxel_count() == 0) throw DataError("standardize_geometry: mask fell outside the standard crop");
  return {std::move(out), std::move(out_mask)};
}

TensorF flat_field(const TensorF& x, const IntensityConfig& cfg) {
  const std::size_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t n = d * h * w;
  const std::array<double, 3> sigma{cfg.flat_field_fraction * d, cfg.flat_field_fraction * h,
                                    cfg.flat_field_fraction * w};
  const auto smooth = nc::gaussian_blur3d(x, sigma);
  const auto support = nc::gaussian_blur3d(TensorF({1, d, h, w}, 1.0f), sigma);
  std::vector<float> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> field(n);
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) {
      field[i] = static_cast<double>(smooth[ch * n + i]) / support[i];
      mean += field[i];
    }
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double v = x[ch * n + i];
      out[ch * n + i] = mean > 0.0 ? static_cast<float>(v / (field[i] / mean + cfg.flat_field_eps)) : static_cast<float>(v);
    }
  }
  return TensorF(x.shape(), std::move(out));
}

double percentile(std::vector<float> values, double pct) {
  if (values.empty()) throw UsageError("percentile of an empty set");
  const double rank = std::clamp(pct, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  std::nth_element(values.begin(), values.begin() + lo, values.end());
  const double a = values[lo];
  if (lo + 1 >= values.size()) return a;
  const double b = *std::min_element(values.begin() + lo + 1, values.end());
  return a + (rank - lo) * (b - a);
}

TensorF clip_and_rescale(const TensorF& x, double low_pct, double high_pct) {
  std::vector<float> all(x.data().begin(), x.data().end());
  const double lo = percentile(all, low_pct);
  const double hi = percentile(std::move(all), high_pct);
  // Relative tolerance absorbs float roundoff of the flat-field ratio.
  if (!(hi - lo > 1e-5 * std::max(std::abs(hi), std::abs(lo)))) {
    spdlog::warn("constant volume (p{}={} equals p{}); output set to zeros", low_pct, lo, high_pct);
    return TensorF(x.shape(), 0.0f);
  }
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>((std::clamp(static_cast<double>(x[i]), lo, hi) - lo) / (hi - lo));
  }
  return TensorF(x.shape(), std::move(out));
}

Volume normalize_intensity(const Volume& v, const IntensityConfig& cfg) {
  TensorF x = v.data;
  if (v.baseline) {
    const std::size_t n = v.baseline->numel();
    if (n * v.channels() != x.numel()) throw DataError("baseline is not aligned with the series");
    std::vector<float> sub(x.numel());
    for (std::size_t i = 0; i < sub.size(); ++i) sub[i] = std::max(0.0f, x[i] - (*v.baseline)[i % n]);
    x = TensorF(x.shape(), std::move(sub));
  }
  Volume out = v;
  out.baseline.reset();
  out.data = clip_and_rescale(flat_field(x, cfg), cfg.low_percentile, cfg.high_percentile);
  return out;
}

void to_json(nlohmann::json& j, const GeometryConfig& c) {
  j = {{"crop", c.crop}, {"target_spacing", c.target_spacing}};
}

void from_json(const nlohmann::json& j, GeometryConfig& c) {
  GeometryConfig d;
  c.crop = j.value("crop", d.crop);
  c.target_spacing = j.value("target_spacing", d.target_spacing);
}

void to_json(nlohmann::json& j, const IntensityConfig& c) {
  j = {{"flat_field_fraction", c.flat_field_fraction},
       {"flat_field_eps", c.flat_field_eps},
       {"low_percentile", c.low_percentile},
       {"high_percentile", c.high_percentile}};
}

void from_json(const nlohmann::json& j, IntensityConfig& c) {
  IntensityConfig d;
  c.flat_field_fraction = j.value("flat_field_fraction", d.flat_field_fraction);
  c.flat_field_eps = j.value("flat_field_eps", d.flat_field_eps);
  c.low_percentile = j.value("low_percentile", d.low_percentile);
  c.high_percentile = j.value("high_percentile", d.high_percentile);
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"geometry", c.geometry}, {"intensity", c.intensity}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  c.geometry = j.value("geometry", GeometryConfig{});
  c.intensity = j.value("intensity", IntensityConfig{});
}

}  // namespace guided_attn::phantom
