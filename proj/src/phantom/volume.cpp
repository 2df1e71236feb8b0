#include "guided_attn/phantom/volume.hpp"

#include <vector>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::phantom {

std::string to_string(Orientation o) { return o == Orientation::kAxial ? "axial" : "sagittal"; }

std::string to_string(Laterality l) { return l == Laterality::kUnilateral ? "unilateral" : "bilateral"; }

Orientation orientation_from_string(const std::string& s) {
  if (s == "axial") return Orientation::kAxial;
  if (s == "sagittal") return Orientation::kSagittal;
  throw DataError("unknown orientation '" + s + "'");
}

Laterality laterality_from_string(const std::string& s) {
  if (s == "unilateral") return Laterality::kUnilateral;
  if (s == "bilateral") return Laterality::kBilateral;
  throw DataError("unknown laterality '" + s + "'");
}

std::size_t Mask::voxel_count() const {
  std::size_t n = 0;
  for (float v : data.data()) n += v > 0.5f;
  return n;
}

numcore::Tensor<float> swap_depth_width(const numcore::Tensor<float>& x) {
  const std::size_t c = x.dim(0), a = x.dim(1), b = x.dim(2), e = x.dim(3);
  std::vector<float> out(x.numel());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j)
        for (std::size_t k = 0; k < e; ++k) out[((ch * e + k) * b + j) * a + i] = x[((ch * a + i) * b + j) * e + k];
  return numcore::Tensor<float>({c, e, b, a}, std::move(out));
}

std::size_t connected_components(const Mask& mask) {
  const auto [d, h, w] = mask.extent();
  const auto values = mask.data.data();
  std::vector<char> seen(values.size(), 0);
  std::vector<std::size_t> stack;
  std::size_t components = 0;
  for (std::size_t start = 0; start < values.size(); ++start) {
    if (values[start] <= 0.5f || seen[start]) continue;
    ++components;
    seen[start] = 1;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t z = i / (h * w), y = (i / w) % h, x = i % w;
      auto visit = [&](std::size_t j) {
        if (values[j] > 0.5f && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (z > 0) visit(i - h * w);
      if (z + 1 < d) visit(i + h * w);
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
    }
  }
  return components;
}

std::array<double, 3> mask_centroid(const Mask& mask) {
  const auto [d, h, w] = mask.extent();
  std::array<double, 3> sum{0, 0, 0};
  double count = 0;
  for (std::size_t z = 0; z < d; ++z)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (mask.data[(z * h + y) * w + x] <= 0.5f) continue;
        sum[0] += z;
        sum[1] += y;
        sum[2] += x;
        count += 1;
      }
  if (count == 0) throw DataError("mask is empty");
  return {sum[0] / count, sum[1] / count, sum[2] / count};
}

}  // namespace guided_attn::phantom
