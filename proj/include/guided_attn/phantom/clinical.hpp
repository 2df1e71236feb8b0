#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace guided_attn::phantom {

struct FieldDescriptor {
  std::string name;
  // 0 marks the numeric field; otherwise the number of categories.
  std::size_t cardinality = 0;

  bool numeric() const { return cardinality == 0; }
};

struct ClinicalSchema {
  std::vector<FieldDescriptor> fields;

  std::size_t encoded_length() const;
  std::size_t categorical_count() const;
};

// multifocal(2), hormone receptor(2), HER2(2), subtype(4), ethnicity(6), age.
ClinicalSchema default_schema();

// Categories are indexed in schema order; -1 marks a missing or unknown value.
struct RawClinical {
  std::vector<int> categories;
  double age = 0.0;
};

struct ClinicalStats {
  double mean = 0.0;
  double stddev = 1.0;
};

ClinicalStats compute_clinical_stats(std::span<const RawClinical> training);

// One-hot blocks followed by the z-scored numeric field. Unknown categories
// give an all-zero block and a warning; stddev 0 emits the numeric field as 0.
std::vector<float> encode_clinical(const RawClinical& raw, const ClinicalSchema& schema,
                                   const ClinicalStats& stats);

void to_json(nlohmann::json& j, const RawClinical& r);
void from_json(const nlohmann::json& j, RawClinical& r);

}  // namespace guided_attn::phantom
