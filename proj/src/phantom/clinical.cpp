#include "guided_attn/phantom/clinical.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::phantom {

std::size_t ClinicalSchema::encoded_length() const {
  std::size_t k = 0;
  for (const auto& f : fields) k += f.numeric() ? 1 : f.cardinality;
  return k;
}

std::size_t ClinicalSchema::categorical_count() const {
  std::size_t n = 0;
  for (const auto& f : fields) n += !f.numeric();
  return n;
}

ClinicalSchema default_schema() {
  return {{{"multifocal", 2}, {"hormone_receptor", 2}, {"her2", 2}, {"subtype", 4}, {"ethnicity", 6}, {"age", 0}}};
}

ClinicalStats compute_clinical_stats(std::span<const RawClinical> training) {
  if (training.empty()) throw UsageError("compute_clinical_stats: empty training set");
  double mean = 0;
  for (const auto& r : training) mean += r.age;
  mean /= training.size();
  double var = 0;
  for (const auto& r : training) var += (r.age - mean) * (r.age - mean);
  var /= training.size();
  return {mean, std::sqrt(var)};
}

std::vector<float> encode_clinical(const RawClinical& raw, const ClinicalSchema& schema, const ClinicalStats& stats) {
  if (raw.categories.size() != schema.categorical_count()) {
    throw DataError("clinical record has " + std::to_string(raw.categories.size()) + " categorical fields, schema " +
                    std::to_string(schema.categorical_count()));
  }
  std::vector<float> out;
  out.reserve(schema.encoded_length());
  std::size_t c = 0;
  for (const auto& field : schema.fields) {
    if (field.numeric()) {
      if (stats.stddev == 0.0) {
        spdlog::warn("clinical field '{}' has zero training variance; emitting 0", field.name);
        out.push_back(0.0f);
      } else {
        out.push_back(static_cast<float>((raw.age - stats.mean) / stats.stddev));
      }
      continue;
    }
    const int value = raw.categories[c++];
    const std::size_t start = out.size();
    out.resize(start + field.cardinality, 0.0f);
    if (value < 0 || static_cast<std::size_t>(value) >= field.cardinality) {
      spdlog::warn("clinical field '{}' has unknown category {}; encoding as all zeros", field.name, value);
    } else {
      out[start + static_cast<std::size_t>(value)] = 1.0f;
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const RawClinical& r) { j = {{"categories", r.categories}, {"age", r.age}}; }

void from_json(const nlohmann::json& j, RawClinical& r) {
  r.categories = j.at("categories").get<std::vector<int>>();
  r.age = j.at("age").get<double>();
}

}  // namespace guided_attn::phantom
