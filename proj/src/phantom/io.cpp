#include "guided_attn/phantom/io.hpp"

#include <bit>
#include <fstream>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::phantom {

namespace fs = std::filesystem;

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed header " + path.string() + ": " + e.what());
  }
}

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, const std::vector<unsigned char>& bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void append_f32(std::vector<unsigned char>& out, std::span<const float> values) {
  for (float v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>((bits >> (8 * k)) & 0xffu));
  }
}

std::vector<float> parse_f32(const unsigned char* p, std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[4 * i + k]) << (8 * k);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

numcore::Shape header_shape(const nlohmann::json& h, const fs::path& path) {
  auto shape = h.at("shape").get<numcore::Shape>();
  if (shape.size() != 4) throw DataError(path.string() + ": expected a 4-d shape");
  return shape;
}

}  // namespace

void write_volume(const fs::path& stem, const Volume& v) {
  std::vector<unsigned char> bytes;
  bytes.reserve(4 * (v.data.numel() + (v.baseline ? v.baseline->numel() : 0)));
  append_f32(bytes, v.data.data());
  if (v.baseline) append_f32(bytes, v.baseline->data());
  write_bytes(with_suffix(stem, ".raw"), bytes);
  write_json(with_suffix(stem, ".json"), {{"shape", v.data.shape()},
                                          {"spacing", v.spacing},
                                          {"orientation", to_string(v.orientation)},
                                          {"laterality", to_string(v.laterality)},
                                          {"dtype", "float32"},
                                          {"byte_order", "little"},
                                          {"baseline", v.baseline.has_value()}});
}

Volume read_volume(const fs::path& stem) {
  const auto header_path = with_suffix(stem, ".json");
  const auto h = read_json(header_path);
  Volume v;
  try {
    if (h.at("dtype").get<std::string>() != "float32") throw DataError(header_path.string() + ": volume dtype must be float32");
    const auto shape = header_shape(h, header_path);
    v.spacing = h.at("spacing").get<Spacing>();
    v.orientation = orientation_from_string(h.at("orientation").get<std::string>());
    v.laterality = laterality_from_string(h.at("laterality").get<std::string>());
    const bool has_baseline = h.value("baseline", false);
    const std::size_t n = numcore::shape_numel(shape);
    const std::size_t spatial = n / shape[0];
    const auto bytes = read_bytes(with_suffix(stem, ".raw"));
    const std::size_t expected = 4 * (n + (has_baseline ? spatial : 0));
    if (bytes.size() != expected) {
      throw DataError(stem.string() + ".raw holds " + std::to_string(bytes.size()) + " bytes, header implies " +
                      std::to_string(expected));
    }
    v.data = numcore::Tensor<float>(shape, parse_f32(bytes.data(), n));
    if (has_baseline) {
      v.baseline = numcore::Tensor<float>({1, shape[1], shape[2], shape[3]}, parse_f32(bytes.data() + 4 * n, spatial));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(header_path.string() + ": " + e.what());
  }
  return v;
}

void write_mask(const fs::path& stem, const Mask& m, const Spacing& spacing) {
  std::vector<unsigned char> bytes(m.data.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = m.data[i] > 0.5f ? 1 : 0;
  write_bytes(with_suffix(stem, ".raw"), bytes);
  write_json(with_suffix(stem, ".json"), {{"shape", m.data.shape()},
                                          {"spacing", spacing},
                                          {"orientation", "axial"},
                                          {"laterality", "unilateral"},
                                          {"dtype", "uint8"},
                                          {"provenance", m.provenance == Provenance::kExpert ? "expert" : "synthetic"}});
}

Mask read_mask(const fs::path& stem) {
  const auto header_path = with_suffix(stem, ".json");
  const auto h = read_json(header_path);
  Mask m;
  try {
    if (h.at("dtype").get<std::string>() != "uint8") throw DataError(header_path.string() + ": mask dtype must be uint8");
    const auto shape = header_shape(h, header_path);
    const auto bytes = read_bytes(with_suffix(stem, ".raw"));
    if (bytes.size() != numcore::shape_numel(shape)) throw DataError(stem.string() + ".raw size does not match header");
    std::vector<float> values(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      if (bytes[i] > 1) throw DataError(stem.string() + ".raw: mask values must be 0 or 1");
      values[i] = bytes[i];
    }
    m.data = numcore::Tensor<float>(shape, std::move(values));
    m.provenance = h.value("provenance", std::string("synthetic")) == "expert" ? Provenance::kExpert : Provenance::kSynthetic;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(header_path.string() + ": " + e.what());
  }
  return m;
}

namespace {

nlohmann::json entry_to_json(const ManifestEntry& e) {
  return {{"id", e.id},
          {"cohort", e.cohort},
          {"volume", e.volume.generic_string()},
          {"mask", e.mask.generic_string()},
          {"label", e.label},
          {"clinical", e.clinical},
          {"truth",
           {{"heterogeneity", e.truth.heterogeneity},
            {"clinical_term", e.truth.clinical_term},
            {"score", e.truth.score},
            {"necrosis", e.truth.necrosis}}},
          {"acquisition",
           {{"orientation", to_string(e.acquisition.orientation)},
            {"laterality", to_string(e.acquisition.laterality)},
            {"raw_phases", e.acquisition.raw_phases},
            {"selected", e.acquisition.selected},
            {"raw_spacing", e.acquisition.raw_spacing}}}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.cohort = j.at("cohort").get<std::string>();
  e.volume = j.at("volume").get<std::string>();
  e.mask = j.at("mask").get<std::string>();
  e.label = j.at("label").get<int>();
  if (e.label != 0 && e.label != 1) throw DataError("manifest entry " + e.id + ": label must be 0 or 1");
  e.clinical = j.at("clinical").get<RawClinical>();
  if (j.contains("truth")) {
    const auto& t = j["truth"];
    e.truth = {t.value("heterogeneity", 0.0), t.value("clinical_term", 0.0), t.value("score", 0.0),
               t.value("necrosis", 0.0)};
  }
  if (j.contains("acquisition")) {
    const auto& a = j["acquisition"];
    e.acquisition.orientation = orientation_from_string(a.value("orientation", std::string("axial")));
    e.acquisition.laterality = laterality_from_string(a.value("laterality", std::string("unilateral")));
    e.acquisition.raw_phases = a.value("raw_phases", std::size_t{3});
    e.acquisition.selected = a.value("selected", std::array<std::size_t, 3>{0, 1, 2});
    e.acquisition.raw_spacing = a.value("raw_spacing", Spacing{1.0, 1.0, 1.0});
  }
  return e;
}

}  // namespace

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& e : entries) os << entry_to_json(e).dump() << '\n';
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(entry_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

ManifestEntry write_record(const fs::path& dir, const fs::path& manifest_dir, const PatientRecord& record) {
  fs::create_directories(dir);
  const auto volume_stem = dir / (record.id + "_volume");
  const auto mask_stem = dir / (record.id + "_mask");
  write_volume(volume_stem, record.volume);
  write_mask(mask_stem, record.mask, record.volume.spacing);
  ManifestEntry e;
  e.id = record.id;
  e.cohort = record.cohort;
  e.volume = fs::relative(volume_stem, manifest_dir);
  e.mask = fs::relative(mask_stem, manifest_dir);
  e.clinical = record.clinical;
  e.label = record.label;
  e.truth = record.truth;
  e.acquisition = record.acquisition;
  return e;
}

std::vector<PatientRecord> load_records(const fs::path& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const auto base = manifest_path.parent_path();
  std::vector<PatientRecord> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    PatientRecord r;
    r.id = e.id;
    r.cohort = e.cohort;
    r.volume = read_volume(base / e.volume);
    r.mask = read_mask(base / e.mask);
    if (r.mask.extent() != r.volume.extent()) throw DataError("patient " + e.id + ": mask and volume extents differ");
    r.clinical = e.clinical;
    r.label = e.label;
    r.truth = e.truth;
    r.acquisition = e.acquisition;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace guided_attn::phantom
