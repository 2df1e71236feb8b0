#pragma once

#include <filesystem>
#include <vector>

#include "guided_attn/phantom/cohort.hpp"

namespace guided_attn::phantom {

// `<stem>.raw` holds little-endian float32 (volumes) or uint8 (masks);
// `<stem>.json` records shape, spacing, orientation, laterality and dtype.
void write_volume(const std::filesystem::path& stem, const Volume& v);
Volume read_volume(const std::filesystem::path& stem);
void write_mask(const std::filesystem::path& stem, const Mask& m, const Spacing& spacing);
Mask read_mask(const std::filesystem::path& stem);

// One manifest line per patient. Paths are relative to the manifest file.
struct ManifestEntry {
  std::string id;
  std::string cohort;
  std::filesystem::path volume;
  std::filesystem::path mask;
  RawClinical clinical;
  int label = 0;
  GroundTruth truth;
  AcquisitionInfo acquisition;
};

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

// Writes a preprocessed record under `dir` and returns its manifest entry
// with paths relative to `manifest_dir`.
ManifestEntry write_record(const std::filesystem::path& dir, const std::filesystem::path& manifest_dir,
                           const PatientRecord& record);

// Loads the volumes and masks listed in a manifest.
std::vector<PatientRecord> load_records(const std::filesystem::path& manifest_path);

}  // namespace guided_attn::phantom
