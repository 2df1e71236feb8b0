#include "guided_attn/phantom/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "guided_attn/common/errors.hpp"
#include "guided_attn/common/random.hpp"

namespace guided_attn::phantom {

namespace {

using TensorF = numcore::Tensor<float>;

constexpr double kFieldOfViewMargin = 1.25;

std::uint64_t tag_code(const std::string& tag) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
  return h;
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int categorical(Rng& rng, std::initializer_list<double> probs, double p_missing) {
  if (uniform(rng, 0.0, 1.0) < p_missing) return -1;
  std::vector<double> w(probs);
  return static_cast<int>(std::discrete_distribution<int>(w.begin(), w.end())(rng));
}

// Smooth random texture: a few plane waves over normalized coordinates,
// roughly zero mean and unit amplitude.
struct Texture {
  std::array<std::array<double, 3>, 4> freq{};
  std::array<double, 4> phase{};

  explicit Texture(Rng& rng) {
    for (std::size_t k = 0; k < 4; ++k) {
      for (auto& f : freq[k]) f = uniform(rng, -3.0, 3.0);
      phase[k] = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    }
  }

  double operator()(const std::array<double, 3>& u) const {
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      s += std::cos(std::numbers::pi * (freq[k][0] * u[0] + freq[k][1] * u[1] + freq[k][2] * u[2]) + phase[k]);
    }
    return 0.5 * s;
  }
};

struct Anatomy {
  std::array<double, 3> tumor_center{};  // in units of the crop half-extent
  std::array<double, 3> tumor_radius{};  // same units
  double amplitude = 1.0;
  double rise = 0.2;
  double washout = 1.0;
  double necrosis = 0.0;
  double parenchyma = 0.05;
  std::size_t tumor_side = 0;
};

double tumor_enhancement(const Anatomy& a, double tau) {
  return a.amplitude * (1.0 - std::exp(-tau / a.rise)) * std::exp(-a.washout * tau);
}

double tumor_profile(double rho) { return 1.0 / (1.0 + std::exp((rho - 1.0) / 0.08)); }

double necrotic_core(double rho) { return std::exp(-(rho / 0.6) * (rho / 0.6)); }

RawClinical sample_clinical(Rng& rng) {
  RawClinical r;
  constexpr double kMissing = 0.02;
  r.categories = {categorical(rng, {0.7, 0.3}, kMissing), categorical(rng, {0.4, 0.6}, kMissing),
                  categorical(rng, {0.75, 0.25}, kMissing), categorical(rng, {0.35, 0.25, 0.15, 0.25}, kMissing),
                  categorical(rng, {0.6, 0.15, 0.1, 0.08, 0.05, 0.02}, kMissing)};
  r.age = std::clamp(std::normal_distribution<double>(50.0, 10.0)(rng), 25.0, 85.0);
  return r;
}

PatientRecord generate_patient(const CohortSpec& spec, const GeometryConfig& geometry, std::size_t index) {
  const std::uint64_t base = derive_seed(spec.seed, {tag_code(spec.tag), index});
  Rng anatomy_rng(derive_seed(base, {1}));
  Rng noise_rng(derive_seed(base, {2}));
  Rng acquisition_rng(derive_seed(base, {3}));
  const CohortShift& shift = spec.shift;

  Anatomy a;
  for (std::size_t k = 0; k < 3; ++k) a.tumor_center[k] = uniform(anatomy_rng, -0.3, 0.3);
  // Radii as fractions of the crop extent, converted to half-extent units.
  a.tumor_radius = {2.0 * uniform(anatomy_rng, 0.18, 0.24), 2.0 * uniform(anatomy_rng, 0.14, 0.2),
                    2.0 * uniform(anatomy_rng, 0.14, 0.2)};
  a.amplitude = uniform(anatomy_rng, 0.6, 1.0);
  a.rise = uniform(anatomy_rng, 0.15, 0.3);
  a.washout = uniform(anatomy_rng, 0.5, 1.5);
  a.necrosis = uniform(anatomy_rng, 0.0, 0.85);
  a.parenchyma = uniform(anatomy_rng, 0.03, 0.08);
  const Texture tumor_texture(anatomy_rng);
  const Texture tissue_texture(anatomy_rng);
  RawClinical clinical = sample_clinical(anatomy_rng);

  AcquisitionInfo acq;
  acq.orientation = uniform(acquisition_rng, 0.0, 1.0) < shift.p_sagittal ? Orientation::kSagittal : Orientation::kAxial;
  acq.laterality =
      uniform(acquisition_rng, 0.0, 1.0) < shift.p_bilateral ? Laterality::kBilateral : Laterality::kUnilateral;
  acq.raw_phases = std::uniform_int_distribution<std::size_t>(shift.min_phases, shift.max_phases)(acquisition_rng);
  for (std::size_t k = 0; k < 3; ++k) {
    acq.raw_spacing[k] = geometry.target_spacing[k] * (1.0 + uniform(acquisition_rng, -shift.spacing_jitter, shift.spacing_jitter));
  }
  a.tumor_side = std::uniform_int_distribution<std::size_t>(0, 1)(acquisition_rng);
  std::array<double, 3> bias_dir{};
  for (auto& g : bias_dir) g = std::normal_distribution<double>(0.0, 1.0)(acquisition_rng);
  const double bias_norm = std::hypot(bias_dir[0], bias_dir[1], bias_dir[2]);
  for (auto& g : bias_dir) g /= bias_norm > 0 ? bias_norm : 1.0;

  // Raw grid of one breast in axial order; bilateral doubles the width.
  Extent breast_extent{};
  std::array<double, 3> half_crop{};
  for (std::size_t k = 0; k < 3; ++k) {
    half_crop[k] = 0.5 * geometry.crop[k] * geometry.target_spacing[k];
    breast_extent[k] = std::max<std::size_t>(
        2, static_cast<std::size_t>(std::lround(2.0 * kFieldOfViewMargin * half_crop[k] / acq.raw_spacing[k])));
  }
  const bool bilateral = acq.laterality == Laterality::kBilateral;
  const std::size_t sides = bilateral ? 2 : 1;
  const std::size_t d = breast_extent[0], h = breast_extent[1], w = breast_extent[2] * sides;
  const std::size_t n = d * h * w;
  const std::size_t phases = acq.raw_phases;

  std::vector<double> baseline(n, 0.0), tissue(n, 0.0), profile(n, 0.0), bias(n, 1.0);
  std::vector<float> mask(n, 0.0f);
  double sum = 0, sum_sq = 0, count = 0;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t side = x / breast_extent[2];
        const std::size_t lx = x % breast_extent[2];
        // Coordinates in crop half-extent units, centred on this breast.
        const std::array<double, 3> u{
            (z + 0.5 - 0.5 * d) * acq.raw_spacing[0] / half_crop[0],
            (y + 0.5 - 0.5 * h) * acq.raw_spacing[1] / half_crop[1],
            (lx + 0.5 - 0.5 * breast_extent[2]) * acq.raw_spacing[2] / half_crop[2]};
        const double rb = std::sqrt((u[0] / 1.2) * (u[0] / 1.2) + ((u[1] - 0.25) / 1.15) * ((u[1] - 0.25) / 1.15) +
                                    (u[2] / 1.1) * (u[2] / 1.1));
        const double breast = 1.0 / (1.0 + std::exp((rb - 1.0) / 0.05));
        const std::size_t i = (z * h + y) * w + x;
        const double tex = tissue_texture(u);
        baseline[i] = breast * (0.35 + 0.08 * tex);
        tissue[i] = breast * (1.0 + 0.3 * tex);
        // Bias over the full field of view, in [-1, 1] per axis.
        const std::array<double, 3> g{(z + 0.5) / d * 2.0 - 1.0, (y + 0.5) / h * 2.0 - 1.0, (x + 0.5) / w * 2.0 - 1.0};
        bias[i] = std::exp(shift.bias_amplitude *
                           (bias_dir[0] * g[0] + bias_dir[1] * g[1] + bias_dir[2] * g[2] + 0.5 * (g[1] * g[1] - 1.0 / 3.0)));
        if (side != a.tumor_side % sides) continue;
        double rho_sq = 0;
        for (std::size_t k = 0; k < 3; ++k) {
          const double t = (u[k] - a.tumor_center[k]) / a.tumor_radius[k];
          rho_sq += t * t;
        }
        const double rho = std::sqrt(rho_sq);
        // Tissue term without the partial-volume edge; the label statistic uses it.
        const double tissue_term = (1.0 - a.necrosis * necrotic_core(rho)) * (1.0 + 0.1 * tumor_texture(u));
        profile[i] = tumor_profile(rho) * tissue_term;
        if (rho <= 1.0) {
          mask[i] = 1.0f;
          sum += tissue_term;
          sum_sq += tissue_term * tissue_term;
          count += 1;
        }
      }
  if (count == 0) throw DataError("generated tumor mask is empty for patient " + std::to_string(index));
  const double mean = sum / count;
  const double var = std::max(0.0, sum_sq / count - mean * mean);

  std::normal_distribution<double> noise(0.0, shift.noise_std);
  const double gain = shift.intensity_gain;
  std::vector<float> base_out(n), series(phases * n);
  for (std::size_t i = 0; i < n; ++i) base_out[i] = static_cast<float>(gain * (baseline[i] * bias[i] + noise(noise_rng)));
  for (std::size_t p = 0; p < phases; ++p) {
    const double tau = static_cast<double>(p + 1) / static_cast<double>(phases);
    const double e_tumor = tumor_enhancement(a, tau);
    const double e_tissue = a.parenchyma * (1.0 - std::exp(-tau / 0.4));
    for (std::size_t i = 0; i < n; ++i) {
      const double clean = baseline[i] + e_tissue * tissue[i] + e_tumor * profile[i];
      series[p * n + i] = static_cast<float>(gain * (clean * bias[i] + noise(noise_rng)));
    }
  }

  PatientRecord r;
  r.id = spec.tag + "_" + std::to_string(index);
  r.cohort = spec.tag;
  r.clinical = std::move(clinical);
  r.acquisition = acq;
  r.truth.heterogeneity = std::sqrt(var) / mean;
  r.truth.clinical_term = clinical_term(r.clinical);
  r.truth.necrosis = a.necrosis;

  TensorF data({phases, d, h, w}, std::move(series));
  TensorF pre({1, d, h, w}, std::move(base_out));
  TensorF mask_t({1, d, h, w}, std::move(mask));
  Spacing spacing = acq.raw_spacing;
  if (acq.orientation == Orientation::kSagittal) {
    data = swap_depth_width(data);
    pre = swap_depth_width(pre);
    mask_t = swap_depth_width(mask_t);
    std::swap(spacing[0], spacing[2]);
  }
  r.volume.data = std::move(data);
  r.volume.baseline = std::move(pre);
  r.volume.spacing = spacing;
  r.volume.orientation = acq.orientation;
  r.volume.laterality = acq.laterality;
  r.mask = Mask{std::move(mask_t), Provenance::kSynthetic};
  return r;
}

std::vector<double> zscores(const std::vector<double>& v) {
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / v.size());
  std::vector<double> z(v.size(), 0.0);
  if (sd > 0)
    for (std::size_t i = 0; i < v.size(); ++i) z[i] = (v[i] - mean) / sd;
  return z;
}

}  // namespace

std::size_t CohortSpec::positive_count() const {
  if (!(prevalence > 0.0 && prevalence < 1.0)) throw UsageError("cohort " + tag + ": prevalence must lie in (0, 1)");
  const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(n_patients) * prevalence));
  if (k == 0 || k >= n_patients) {
    throw UsageError("cohort " + tag + ": prevalence " + std::to_string(prevalence) + " is unreachable with " +
                     std::to_string(n_patients) + " patients");
  }
  return k;
}

double clinical_term(const RawClinical& raw) {
  if (raw.categories.size() != 5) throw DataError("clinical_term expects the default schema");
  const auto& c = raw.categories;
  double t = 0.0;
  if (c[0] == 0) t += 0.3;             // unifocal
  if (c[1] == 0) t += 1.0;             // hormone receptor negative
  if (c[2] == 1) t += 0.8;             // HER2 positive
  if (c[3] == 2 || c[3] == 3) t += 0.7;  // HER2-enriched or triple negative
  t -= 0.05 * (raw.age - 50.0);
  return t;
}

std::vector<PatientRecord> generate_cohort(const CohortSpec& spec, const GeometryConfig& geometry) {
  const std::size_t positives = spec.positive_count();
  if (spec.shift.min_phases < 3 || spec.shift.max_phases < spec.shift.min_phases) {
    throw UsageError("cohort " + spec.tag + ": phase range must satisfy 3 <= min_phases <= max_phases");
  }
  std::vector<PatientRecord> out;
  out.reserve(spec.n_patients);
  for (std::size_t i = 0; i < spec.n_patients; ++i) out.push_back(generate_patient(spec, geometry, i));

  std::vector<double> het, clin;
  for (const auto& r : out) {
    het.push_back(r.truth.heterogeneity);
    clin.push_back(r.truth.clinical_term);
  }
  const auto zh = zscores(het), zc = zscores(clin);
  std::vector<std::size_t> order(out.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < out.size(); ++i) out[i].truth.score = 0.7 * zh[i] + 0.3 * zc[i];
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return out[x].truth.score > out[y].truth.score; });
  for (std::size_t k = 0; k < positives; ++k) out[order[k]].label = 1;
  return out;
}

PatientRecord preprocess(const PatientRecord& raw, const PipelineConfig& cfg) {
  PatientRecord r = raw;
  const auto selected = select_phase_indices(breast_curve(raw.volume));
  Volume phases = select_phases(raw.volume);
  auto [volume, mask] = standardize_geometry(phases, raw.mask, cfg.geometry);
  r.volume = normalize_intensity(volume, cfg.intensity);
  r.mask = std::move(mask);
  r.acquisition.selected = selected;
  return r;
}

std::vector<PatientRecord> generate_preprocessed(const CohortSpec& spec, const PipelineConfig& cfg) {
  auto raw = generate_cohort(spec, cfg.geometry);
  std::vector<PatientRecord> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(preprocess(r, cfg));
  return out;
}

std::vector<CohortSpec> default_cohorts(double scale, std::uint64_t seed) {
  if (!(scale > 0.0)) throw UsageError("cohort scale must be positive");
  struct Source {
    const char* tag;
    double patients;
    double responders;
    CohortShift shift;
  };
  const Source sources[] = {
      {"A", 976, 313, {1.0, 0.02, 0.10, 0.05, 0.0, 0.0, 4, 6}},
      {"B", 279, 64, {1.4, 0.03, 0.20, 0.10, 0.0, 0.9, 4, 5}},
      {"C", 166, 49, {0.7, 0.035, 0.15, 0.10, 0.9, 0.0, 3, 4}},
      {"D", 64, 11, {1.8, 0.04, 0.25, 0.15, 0.3, 0.5, 4, 6}},
  };
  std::vector<CohortSpec> out;
  std::uint64_t k = 0;
  for (const auto& s : sources) {
    CohortSpec c;
    c.tag = s.tag;
    c.n_patients = static_cast<std::size_t>(std::llround(s.patients / scale));
    c.prevalence = s.responders / s.patients;
    c.shift = s.shift;
    c.seed = derive_seed(seed, {k++});
    out.push_back(c);
  }
  return out;
}

void to_json(nlohmann::json& j, const CohortShift& s) {
  j = {{"intensity_gain", s.intensity_gain}, {"noise_std", s.noise_std},     {"bias_amplitude", s.bias_amplitude},
       {"spacing_jitter", s.spacing_jitter}, {"p_sagittal", s.p_sagittal},   {"p_bilateral", s.p_bilateral},
       {"min_phases", s.min_phases},         {"max_phases", s.max_phases}};
}

void from_json(const nlohmann::json& j, CohortShift& s) {
  CohortShift d;
  s.intensity_gain = j.value("intensity_gain", d.intensity_gain);
  s.noise_std = j.value("noise_std", d.noise_std);
  s.bias_amplitude = j.value("bias_amplitude", d.bias_amplitude);
  s.spacing_jitter = j.value("spacing_jitter", d.spacing_jitter);
  s.p_sagittal = j.value("p_sagittal", d.p_sagittal);
  s.p_bilateral = j.value("p_bilateral", d.p_bilateral);
  s.min_phases = j.value("min_phases", d.min_phases);
  s.max_phases = j.value("max_phases", d.max_phases);
}

void to_json(nlohmann::json& j, const CohortSpec& s) {
  j = {{"tag", s.tag}, {"n_patients", s.n_patients}, {"prevalence", s.prevalence}, {"shift", s.shift}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, CohortSpec& s) {
  CohortSpec d;
  s.tag = j.value("tag", d.tag);
  s.n_patients = j.value("n_patients", d.n_patients);
  s.prevalence = j.value("prevalence", d.prevalence);
  s.shift = j.value("shift", d.shift);
  s.seed = j.value("seed", d.seed);
}

}  // namespace guided_attn::phantom
