#pragma once

#include <filesystem>
#include <vector>

#include "guided_attn/model/config.hpp"
#include "guided_attn/model/network.hpp"

namespace guided_attn::model {

struct CheckpointMeta {
  int stage = 1;
  int epoch = 0;
  double val_loss = 0.0;
};

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  Parameters<float> params;
};

// Writes `<path>` (JSON manifest: config, stage, epoch, validation loss,
// tensor names and shapes, total parameter count) and `<path>.bin` (flat
// little-endian float32 values in declaration order).
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

// Throws DataError when the blob size, tensor list or parameter count does
// not match the layout implied by the stored config.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Converts between training precision and the float32 storage format.
template <typename Real>
Parameters<float> to_float(const Parameters<Real>& params);
template <typename Real>
Parameters<Real> from_float(const Parameters<float>& params);

}  // namespace guided_attn::model
