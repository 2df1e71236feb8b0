#include "guided_attn/model/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::model {

namespace {

std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p += ".bin";
  return p;
}

void put_le32(std::ofstream& os, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  unsigned char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(bytes), 4);
}

float get_le32(const unsigned char* bytes) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto layout = parameter_layout(ck.config);
  if (layout.size() != ck.params.size()) throw UsageError("save_checkpoint: parameter list does not match config");
  std::size_t count = 0;
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (ck.params[i].shape() != layout[i].shape) {
      throw UsageError("save_checkpoint: shape mismatch for " + layout[i].name);
    }
    tensors.push_back({{"name", layout[i].name}, {"shape", layout[i].shape}});
    count += ck.params[i].numel();
  }
  nlohmann::json manifest{{"format", "guided-attn-checkpoint/1"},
                          {"config", ck.config},
                          {"stage", ck.meta.stage},
                          {"epoch", ck.meta.epoch},
                          {"val_loss", ck.meta.val_loss},
                          {"parameter_count", count},
                          {"blob", blob_path(path).filename().string()},
                          {"tensors", tensors}};
  std::ofstream blob(blob_path(path), std::ios::binary);
  if (!blob) throw DataError("cannot write " + blob_path(path).string());
  for (const auto& t : ck.params)
    for (float v : t.data()) put_le32(blob, v);
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  os << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  nlohmann::json manifest;
  try {
    is >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint manifest " + path.string() + ": " + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = manifest.at("config").get<ModelConfig>();
    ck.meta.stage = manifest.at("stage").get<int>();
    ck.meta.epoch = manifest.at("epoch").get<int>();
    ck.meta.val_loss = manifest.at("val_loss").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint manifest " + path.string() + ": " + e.what());
  }
  const auto layout = parameter_layout(ck.config);
  std::size_t expected = 0;
  for (const auto& s : layout) expected += numcore::shape_numel(s.shape);
  const std::size_t recorded = manifest.value("parameter_count", std::size_t{0});
  if (recorded != expected) {
    throw DataError("checkpoint parameter-count mismatch: manifest records " + std::to_string(recorded) +
                    ", config implies " + std::to_string(expected));
  }
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != layout.size()) {
    throw DataError("checkpoint lists " + std::to_string(tensors.size()) + " tensors, config implies " +
                    std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != layout[i].name ||
        tensors[i].at("shape").get<numcore::Shape>() != layout[i].shape) {
      throw DataError("checkpoint tensor " + std::to_string(i) + " does not match layout entry " + layout[i].name);
    }
  }
  const auto blob_file = path.parent_path() / manifest.value("blob", blob_path(path).filename().string());
  std::ifstream blob(blob_file, std::ios::binary);
  if (!blob) throw DataError("cannot open checkpoint blob " + blob_file.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected * 4) {
    throw DataError("checkpoint parameter-count mismatch: blob holds " + std::to_string(bytes.size() / 4) +
                    " values, expected " + std::to_string(expected));
  }
  std::size_t offset = 0;
  for (const auto& spec : layout) {
    std::vector<float> values(numcore::shape_numel(spec.shape));
    for (auto& v : values) {
      v = get_le32(bytes.data() + offset);
      offset += 4;
    }
    ck.params.emplace_back(spec.shape, std::move(values));
  }
  return ck;
}

template <typename Real>
Parameters<float> to_float(const Parameters<Real>& params) {
  Parameters<float> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.template cast<float>());
  return out;
}

template <typename Real>
Parameters<Real> from_float(const Parameters<float>& params) {
  Parameters<Real> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.template cast<Real>());
  return out;
}

template Parameters<float> to_float(const Parameters<float>&);
template Parameters<float> to_float(const Parameters<double>&);
template Parameters<float> from_float(const Parameters<float>&);
template Parameters<double> from_float(const Parameters<float>&);

}  // namespace guided_attn::model
