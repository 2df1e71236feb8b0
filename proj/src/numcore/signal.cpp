#include "guided_attn/numcore/signal.hpp"

#include <cmath>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::numcore {
namespace {

void require_volume(const Shape& s, const char* op) {
  if (s.size() != 4) throw UsageError(std::string(op) + ": expected [C x D x H x W], got " + shape_to_string(s));
}

// Source coordinate of output voxel i under align-corners.
struct Tap {
  std::size_t lo, hi;
  double frac;
};

std::vector<Tap> axis_taps(std::size_t n_in, std::size_t n_out) {
  std::vector<Tap> taps(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double src = (n_out == 1 || n_in == 1)
                           ? 0.0
                           : static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(src));
    if (lo > n_in - 1) lo = n_in - 1;
    const std::size_t hi = std::min(lo + 1, n_in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

// Blur along one axis of a [C x D x H x W] buffer.
template <typename Real>
void blur_axis(std::vector<Real>& buf, const std::array<std::size_t, 4>& ext, std::size_t axis,
               const std::vector<double>& kernel) {
  if (kernel.size() == 1) return;
  const std::ptrdiff_t radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::size_t stride = 1;
  for (std::size_t a = 3; a > axis; --a) stride *= ext[a];
  const std::size_t n = ext[axis];
  const std::size_t outer = buf.size() / (n * stride);
  std::vector<Real> line(n), out(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t s = 0; s < stride; ++s) {
      const std::size_t base = o * n * stride + s;
      for (std::size_t i = 0; i < n; ++i) line[i] = buf[base + i * stride];
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0;
        for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
          const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i) + k;
          if (j < 0 || j >= static_cast<std::ptrdiff_t>(n)) continue;
          acc += kernel[static_cast<std::size_t>(k + radius)] * static_cast<double>(line[static_cast<std::size_t>(j)]);
        }
        out[i] = static_cast<Real>(acc);
      }
      for (std::size_t i = 0; i < n; ++i) buf[base + i * stride] = out[i];
    }
}

}  // namespace

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw UsageError("gaussian_kernel: sigma must be finite and >= 0");
  if (sigma == 0.0) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (auto& v : k) v /= total;
  return k;
}

template <typename Real>
Tensor<Real> gaussian_blur3d(const Tensor<Real>& x, const std::array<double, 3>& sigma) {
  require_volume(x.shape(), "gaussian_blur3d");
  const std::array<std::size_t, 4> ext{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  std::vector<Real> buf(x.data().begin(), x.data().end());
  for (std::size_t a = 0; a < 3; ++a) blur_axis(buf, ext, a + 1, gaussian_kernel(sigma[a]));
  return Tensor<Real>(x.shape(), std::move(buf));
}

template <typename Real>
Tensor<Real> resample_trilinear(const Tensor<Real>& x, const std::array<std::size_t, 3>& target) {
  require_volume(x.shape(), "resample_trilinear");
  const auto [D, H, W] = target;
  if (D == 0 || H == 0 || W == 0) throw UsageError("resample_trilinear: zero-extent target");
  const std::size_t C = x.dim(0), sd = x.dim(1), sh = x.dim(2), sw = x.dim(3);
  if (sd == 0 || sh == 0 || sw == 0) throw UsageError("resample_trilinear: zero-extent source");
  const auto tz = axis_taps(sd, D), ty = axis_taps(sh, H), tx = axis_taps(sw, W);
  auto src = x.data();
  std::vector<Real> out(C * D * H * W);
  auto at = [&](std::size_t c, std::size_t z, std::size_t y, std::size_t w) {
    return ((c * sd + z) * sh + y) * sw + w;
  };
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t w = 0; w < W; ++w) {
          const Tap& a = tz[z];
          const Tap& b = ty[y];
          const Tap& e = tx[w];
          const double fz = a.frac, fy = b.frac, fx = e.frac;
          const double v =
              (1 - fz) * ((1 - fy) * ((1 - fx) * src[at(c, a.lo, b.lo, e.lo)] + fx * src[at(c, a.lo, b.lo, e.hi)]) +
                          fy * ((1 - fx) * src[at(c, a.lo, b.hi, e.lo)] + fx * src[at(c, a.lo, b.hi, e.hi)])) +
              fz * ((1 - fy) * ((1 - fx) * src[at(c, a.hi, b.lo, e.lo)] + fx * src[at(c, a.hi, b.lo, e.hi)]) +
                    fy * ((1 - fx) * src[at(c, a.hi, b.hi, e.lo)] + fx * src[at(c, a.hi, b.hi, e.hi)]));
          out[((c * D + z) * H + y) * W + w] = static_cast<Real>(v);
        }
  Shape shape{C, D, H, W};
  if (!x.requires_grad()) return Tensor<Real>(std::move(shape), std::move(out));
  return x.tape()->record(
      std::move(shape), std::move(out),
      [x, tz, ty, tx, C, D, H, W, sd, sh, sw](std::span<const Real> g, Tape<Real>& t) {
        std::vector<Real> gx(x.numel(), Real(0));
        auto at = [&](std::size_t c, std::size_t z, std::size_t y, std::size_t w) {
          return ((c * sd + z) * sh + y) * sw + w;
        };
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t z = 0; z < D; ++z)
            for (std::size_t y = 0; y < H; ++y)
              for (std::size_t w = 0; w < W; ++w) {
                const double gv = g[((c * D + z) * H + y) * W + w];
                if (gv == 0.0) continue;
                const Tap& a = tz[z];
                const Tap& b = ty[y];
                const Tap& e = tx[w];
                const double wz[2] = {1 - a.frac, a.frac}, wy[2] = {1 - b.frac, b.frac}, wx[2] = {1 - e.frac, e.frac};
                const std::size_t iz[2] = {a.lo, a.hi}, iy[2] = {b.lo, b.hi}, ix[2] = {e.lo, e.hi};
                for (int p = 0; p < 2; ++p)
                  for (int q = 0; q < 2; ++q)
                    for (int r = 0; r < 2; ++r)
                      gx[at(c, iz[p], iy[q], ix[r])] += static_cast<Real>(gv * wz[p] * wy[q] * wx[r]);
              }
        t.accumulate(x.node(), gx);
      });
}

template <typename Real>
Tensor<Real> resample_nearest(const Tensor<Real>& x, const std::array<std::size_t, 3>& target) {
  require_volume(x.shape(), "resample_nearest");
  const auto [D, H, W] = target;
  if (D == 0 || H == 0 || W == 0) throw UsageError("resample_nearest: zero-extent target");
  const std::size_t C = x.dim(0), sd = x.dim(1), sh = x.dim(2), sw = x.dim(3);
  auto nearest = [](const std::vector<Tap>& taps) {
    std::vector<std::size_t> idx(taps.size());
    for (std::size_t i = 0; i < taps.size(); ++i) idx[i] = taps[i].frac < 0.5 ? taps[i].lo : taps[i].hi;
    return idx;
  };
  const auto nz = nearest(axis_taps(sd, D)), ny = nearest(axis_taps(sh, H)), nx = nearest(axis_taps(sw, W));
  auto src = x.data();
  std::vector<Real> out(C * D * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < D; ++z)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t w = 0; w < W; ++w)
          out[((c * D + z) * H + y) * W + w] = src[((c * sd + nz[z]) * sh + ny[y]) * sw + nx[w]];
  return Tensor<Real>(Shape{C, D, H, W}, std::move(out));
}

template Tensor<float> gaussian_blur3d(const Tensor<float>&, const std::array<double, 3>&);
template Tensor<double> gaussian_blur3d(const Tensor<double>&, const std::array<double, 3>&);
template Tensor<float> resample_trilinear(const Tensor<float>&, const std::array<std::size_t, 3>&);
template Tensor<double> resample_trilinear(const Tensor<double>&, const std::array<std::size_t, 3>&);
template Tensor<float> resample_nearest(const Tensor<float>&, const std::array<std::size_t, 3>&);
template Tensor<double> resample_nearest(const Tensor<double>&, const std::array<std::size_t, 3>&);

}  // namespace guided_attn::numcore
