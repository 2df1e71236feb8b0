#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guided_attn/phantom/clinical.hpp"
#include "guided_attn/phantom/preprocess.hpp"
#include "guided_attn/phantom/volume.hpp"

namespace guided_attn::phantom {

struct CohortShift {
  double intensity_gain = 1.0;
  double noise_std = 0.02;
  double bias_amplitude = 0.1;
  double spacing_jitter = 0.05;
  double p_sagittal = 0.0;
  double p_bilateral = 0.0;
  std::size_t min_phases = 4;
  std::size_t max_phases = 6;
};

struct CohortSpec {
  std::string tag = "A";
  std::size_t n_patients = 98;
  double prevalence = 0.3207;
  CohortShift shift;
  std::uint64_t seed = 0;

  // round(n * prevalence); throws UsageError when it is 0 or n.
  std::size_t positive_count() const;
};

// Quantities behind the label rule, kept for diagnostics and oracles.
struct GroundTruth {
  double heterogeneity = 0.0;  // coefficient of variation of clean tumor enhancement in the mask
  double clinical_term = 0.0;
  double score = 0.0;          // 0.7 z(heterogeneity) + 0.3 z(clinical), z over the cohort
  double necrosis = 0.0;
};

struct AcquisitionInfo {
  Orientation orientation = Orientation::kAxial;
  Laterality laterality = Laterality::kUnilateral;
  std::size_t raw_phases = 3;
  std::array<std::size_t, 3> selected{0, 1, 2};
  Spacing raw_spacing{1.0, 1.0, 1.0};
};

struct PatientRecord {
  std::string id;
  std::string cohort;
  Volume volume;
  Mask mask;
  RawClinical clinical;
  int label = 0;
  GroundTruth truth;
  AcquisitionInfo acquisition;
};

// Raw multi-phase acquisitions with baseline, in the stored orientation.
// Pure function of (spec, geometry); patient i depends only on (seed, tag, i).
std::vector<PatientRecord> generate_cohort(const CohortSpec& spec, const GeometryConfig& geometry);

// select_phases, standardize_geometry and normalize_intensity in that order.
PatientRecord preprocess(const PatientRecord& raw, const PipelineConfig& cfg);

// generate_cohort followed by preprocess for every patient.
std::vector<PatientRecord> generate_preprocessed(const CohortSpec& spec, const PipelineConfig& cfg);

// Four cohorts at 1:scale of the reference collections: A (I-SPY2), B (DUKE),
// C (I-SPY1), D (NACT), each with its own acquisition shift.
std::vector<CohortSpec> default_cohorts(double scale, std::uint64_t seed);

// The fixed linear clinical term of the label rule.
double clinical_term(const RawClinical& raw);

void to_json(nlohmann::json& j, const CohortShift& s);
void from_json(const nlohmann::json& j, CohortShift& s);
void to_json(nlohmann::json& j, const CohortSpec& s);
void from_json(const nlohmann::json& j, CohortSpec& s);

}  // namespace guided_attn::phantom
