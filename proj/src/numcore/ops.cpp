#include "guided_attn/numcore/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "guided_attn/common/errors.hpp"

namespace guided_attn::numcore {
namespace {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using ConstMap = Eigen::Map<const RowMat<Real>>;
template <typename Real>
using MutMap = Eigen::Map<RowMat<Real>>;

template <typename Real>
ConstMap<Real> as_matrix(std::span<const Real> data, std::size_t rows, std::size_t cols) {
  return ConstMap<Real>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename Real>
MutMap<Real> as_matrix(std::vector<Real>& data, std::size_t rows, std::size_t cols) {
  return MutMap<Real>(data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename Real>
Tensor<Real> finish(Tape<Real>* tape, Shape shape, std::vector<Real> values,
                    typename Tape<Real>::Adjoint adjoint) {
  if (tape == nullptr) return Tensor<Real>(std::move(shape), std::move(values));
  return tape->record(std::move(shape), std::move(values), std::move(adjoint));
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw UsageError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_to_string(s));
  }
}

template <typename Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw UsageError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <typename Real, typename Fwd, typename Back>
Tensor<Real> unary(const Tensor<Real>& a, Fwd fwd, Back back) {
  std::vector<Real> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  Tape<Real>* tape = a.tape();
  return finish<Real>(tape, a.shape(), std::move(out),
                      [a, back](std::span<const Real> g, Tape<Real>& t) {
                        auto x = a.data();
                        std::vector<Real> ga(g.size());
                        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * back(x[i]);
                        t.accumulate(a.node(), ga);
                      });
}

}  // namespace

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish<Real>(common_tape({&a, &b}), a.shape(), std::move(out),
                      [a, b](std::span<const Real> g, Tape<Real>& t) {
                        if (a.requires_grad()) t.accumulate(a.node(), g);
                        if (b.requires_grad()) t.accumulate(b.node(), g);
                      });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return finish<Real>(common_tape({&a, &b}), a.shape(), std::move(out),
                      [a, b](std::span<const Real> g, Tape<Real>& t) {
                        if (a.requires_grad()) t.accumulate(a.node(), g);
                        if (b.requires_grad()) {
                          std::vector<Real> gb(g.begin(), g.end());
                          for (auto& v : gb) v = -v;
                          t.accumulate(b.node(), gb);
                        }
                      });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish<Real>(common_tape({&a, &b}), a.shape(), std::move(out),
                      [a, b](std::span<const Real> g, Tape<Real>& t) {
                        auto x = a.data(), y = b.data();
                        std::vector<Real> tmp(g.size());
                        if (a.requires_grad()) {
                          for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * y[i];
                          t.accumulate(a.node(), tmp);
                        }
                        if (b.requires_grad()) {
                          for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * x[i];
                          t.accumulate(b.node(), tmp);
                        }
                      });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& a, Real factor) {
  return unary(
      a, [factor](Real x) { return x * factor; }, [factor](Real) { return factor; });
}

template <typename Real>
Tensor<Real> square(const Tensor<Real>& a) {
  return unary(
      a, [](Real x) { return x * x; }, [](Real x) { return Real(2) * x; });
}

template <typename Real>
Tensor<Real> add_bias(const Tensor<Real>& a, const Tensor<Real>& bias) {
  require_rank(a.shape(), 2, "add_bias");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (bias.numel() != cols) {
    throw UsageError("add_bias: bias of " + std::to_string(bias.numel()) + " values for " +
                     std::to_string(cols) + " columns");
  }
  std::vector<Real> out(a.numel());
  auto x = a.data(), b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] + b[c];
  return finish<Real>(common_tape({&a, &bias}), a.shape(), std::move(out),
                      [a, bias, rows, cols](std::span<const Real> g, Tape<Real>& t) {
                        if (a.requires_grad()) t.accumulate(a.node(), g);
                        if (bias.requires_grad()) {
                          std::vector<Real> gb(cols, Real(0));
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                          t.accumulate(bias.node(), gb);
                        }
                      });
}

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw UsageError("matmul: inner extents differ " + shape_to_string(a.shape()) + " * " +
                     shape_to_string(b.shape()));
  }
  std::vector<Real> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return finish<Real>(common_tape({&a, &b}), Shape{m, n}, std::move(out),
                      [a, b, m, k, n](std::span<const Real> g, Tape<Real>& t) {
                        auto gm = as_matrix(g, m, n);
                        if (a.requires_grad()) {
                          std::vector<Real> ga(m * k);
                          as_matrix(ga, m, k).noalias() = gm * as_matrix(b.data(), k, n).transpose();
                          t.accumulate(a.node(), ga);
                        }
                        if (b.requires_grad()) {
                          std::vector<Real> gb(k * n);
                          as_matrix(gb, k, n).noalias() = as_matrix(a.data(), m, k).transpose() * gm;
                          t.accumulate(b.node(), gb);
                        }
                      });
}

template <typename Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  require_rank(a.shape(), 2, "matmul_nt");
  require_rank(b.shape(), 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw UsageError("matmul_nt: inner extents differ " + shape_to_string(a.shape()) + " * " +
                     shape_to_string(b.shape()) + "^T");
  }
  std::vector<Real> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), n, k).transpose();
  return finish<Real>(common_tape({&a, &b}), Shape{m, n}, std::move(out),
                      [a, b, m, k, n](std::span<const Real> g, Tape<Real>& t) {
                        auto gm = as_matrix(g, m, n);
                        if (a.requires_grad()) {
                          std::vector<Real> ga(m * k);
                          as_matrix(ga, m, k).noalias() = gm * as_matrix(b.data(), n, k);
                          t.accumulate(a.node(), ga);
                        }
                        if (b.requires_grad()) {
                          std::vector<Real> gb(n * k);
                          as_matrix(gb, n, k).noalias() = gm.transpose() * as_matrix(a.data(), m, k);
                          t.accumulate(b.node(), gb);
                        }
                      });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  require_rank(a.shape(), 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<Real> out(m * n);
  as_matrix(out, n, m) = as_matrix(a.data(), m, n).transpose();
  return finish<Real>(a.tape(), Shape{n, m}, std::move(out),
                      [a, m, n](std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> ga(m * n);
                        as_matrix(ga, m, n) = as_matrix(g, n, m).transpose();
                        t.accumulate(a.node(), ga);
                      });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw UsageError("reshape: " + shape_to_string(a.shape()) + " -> " + shape_to_string(shape));
  }
  if (!a.requires_grad()) return a.with_shape(std::move(shape));
  std::vector<Real> values(a.data().begin(), a.data().end());
  return a.tape()->record(std::move(shape), std::move(values),
                          [a](std::span<const Real> g, Tape<Real>& t) { t.accumulate(a.node(), g); });
}

template <typename Real>
Tensor<Real> gather(const Tensor<Real>& a, std::span<const std::size_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) throw UsageError("gather: index/shape size mismatch");
  auto x = a.data();
  std::vector<Real> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw UsageError("gather: index out of range");
    out[i] = x[index[i]];
  }
  std::vector<std::size_t> idx;
  if (a.requires_grad()) idx.assign(index.begin(), index.end());
  return finish<Real>(a.tape(), std::move(out_shape), std::move(out),
                      [a, idx = std::move(idx)](std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> ga(a.numel(), Real(0));
                        for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
                        t.accumulate(a.node(), ga);
                      });
}

template <typename Real>
Tensor<Real> narrow_cols(const Tensor<Real>& a, std::size_t start, std::size_t count) {
  require_rank(a.shape(), 2, "narrow_cols");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (start + count > cols) throw UsageError("narrow_cols: range exceeds column count");
  std::vector<Real> out(rows * count);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.begin() + r * cols + start, count, out.begin() + r * count);
  return finish<Real>(a.tape(), Shape{rows, count}, std::move(out),
                      [a, start, count, rows, cols](std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> ga(rows * cols, Real(0));
                        for (std::size_t r = 0; r < rows; ++r)
                          std::copy_n(g.begin() + r * count, count, ga.begin() + r * cols + start);
                        t.accumulate(a.node(), ga);
                      });
}

template <typename Real>
Tensor<Real> concat_cols(std::span<const Tensor<Real>> parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t cols = 0;
  Tape<Real>* tape = nullptr;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_cols");
    if (p.dim(0) != rows) throw UsageError("concat_cols: row counts differ");
    cols += p.dim(1);
    Tape<Real>* pt = common_tape({&p});
    if (pt != nullptr) {
      if (tape != nullptr && tape != pt) throw UsageError("concat_cols: inputs on different tapes");
      tape = pt;
    }
  }
  std::vector<Real> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    auto x = p.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.begin() + r * w, w, out.begin() + r * cols + offset);
    offset += w;
  }
  std::vector<Tensor<Real>> saved(parts.begin(), parts.end());
  return finish<Real>(tape, Shape{rows, cols}, std::move(out),
                      [saved = std::move(saved), rows, cols](std::span<const Real> g, Tape<Real>& t) {
                        std::size_t off = 0;
                        for (const auto& p : saved) {
                          const std::size_t w = p.dim(1);
                          if (p.requires_grad()) {
                            std::vector<Real> gp(rows * w);
                            for (std::size_t r = 0; r < rows; ++r)
                              std::copy_n(g.begin() + r * cols + off, w, gp.begin() + r * w);
                            t.accumulate(p.node(), gp);
                          }
                          off += w;
                        }
                      });
}

template <typename Real>
Tensor<Real> concat_rows(std::span<const Tensor<Real>> parts) {
  if (parts.empty()) throw UsageError("concat_rows: no inputs");
  const std::size_t cols = parts[0].dim(1);
  std::size_t rows = 0;
  Tape<Real>* tape = nullptr;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_rows");
    if (p.dim(1) != cols) throw UsageError("concat_rows: column counts differ");
    rows += p.dim(0);
    Tape<Real>* pt = common_tape({&p});
    if (pt != nullptr) {
      if (tape != nullptr && tape != pt) throw UsageError("concat_rows: inputs on different tapes");
      tape = pt;
    }
  }
  std::vector<Real> out;
  out.reserve(rows * cols);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<Tensor<Real>> saved(parts.begin(), parts.end());
  return finish<Real>(tape, Shape{rows, cols}, std::move(out),
                      [saved = std::move(saved)](std::span<const Real> g, Tape<Real>& t) {
                        std::size_t off = 0;
                        for (const auto& p : saved) {
                          if (p.requires_grad()) t.accumulate(p.node(), g.subspan(off, p.numel()));
                          off += p.numel();
                        }
                      });
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias, Real eps) {
  require_rank(x.shape(), 2, "layer_norm");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (gain.numel() != d || bias.numel() != d) throw UsageError("layer_norm: parameter size mismatch");
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<Real> out(rows * d), xhat(rows * d), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = xv.data() + r * d;
    Real mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= Real(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= Real(d);
    rstd[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (row[c] - mu) * rstd[r];
      out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];
    }
  }
  return finish<Real>(
      common_tape({&x, &gain, &bias}), x.shape(), std::move(out),
      [x, gain, bias, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const Real> g,
                                                                               Tape<Real>& t) {
        auto gv = gain.data();
        if (x.requires_grad()) {
          std::vector<Real> gx(rows * d);
          for (std::size_t r = 0; r < rows; ++r) {
            Real m1 = 0, m2 = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const Real dxh = g[r * d + c] * gv[c];
              m1 += dxh;
              m2 += dxh * xhat[r * d + c];
            }
            m1 /= Real(d);
            m2 /= Real(d);
            for (std::size_t c = 0; c < d; ++c) {
              const Real dxh = g[r * d + c] * gv[c];
              gx[r * d + c] = rstd[r] * (dxh - m1 - xhat[r * d + c] * m2);
            }
          }
          t.accumulate(x.node(), gx);
        }
        if (gain.requires_grad() || bias.requires_grad()) {
          std::vector<Real> gg(d, Real(0)), gb(d, Real(0));
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < d; ++c) {
              gg[c] += g[r * d + c] * xhat[r * d + c];
              gb[c] += g[r * d + c];
            }
          if (gain.requires_grad()) t.accumulate(gain.node(), gg);
          if (bias.requires_grad()) t.accumulate(bias.node(), gb);
        }
      });
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  constexpr Real inv_sqrt2 = Real(0.70710678118654752440);
  const Real inv_sqrt_2pi = Real(1) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
  return unary(
      x, [&](Real v) { return Real(0.5) * v * (Real(1) + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](Real v) {
        constexpr Real s = Real(0.70710678118654752440);
        return Real(0.5) * (Real(1) + std::erf(v * s)) + v * std::exp(Real(-0.5) * v * v) * inv_sqrt_2pi;
      });
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw UsageError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto xv = x.data();
  for (Real v : xv) {
    if (!std::isfinite(v)) throw NumericalError("softmax: non-finite input");
  }
  std::vector<Real> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Real mx = xv[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      Real total = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const Real e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  if (!x.requires_grad()) return Tensor<Real>(x.shape(), std::move(out));
  auto y = std::make_shared<std::vector<Real>>(out);
  return x.tape()->record(x.shape(), std::move(out),
                          [x, y, outer, inner, n](std::span<const Real> g, Tape<Real>& t) {
                            std::vector<Real> gx(g.size());
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t in = 0; in < inner; ++in) {
                                const std::size_t base = o * n * inner + in;
                                Real dot = 0;
                                for (std::size_t k = 0; k < n; ++k)
                                  dot += g[base + k * inner] * (*y)[base + k * inner];
                                for (std::size_t k = 0; k < n; ++k) {
                                  const std::size_t i = base + k * inner;
                                  gx[i] = (*y)[i] * (g[i] - dot);
                                }
                              }
                            t.accumulate(x.node(), gx);
                          });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  return finish<Real>(x.tape(), Shape{}, std::vector<Real>{total},
                      [x](std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> gx(x.numel(), g[0]);
                        t.accumulate(x.node(), gx);
                      });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
  if (x.numel() == 0) throw UsageError("mean: empty tensor");
  Real total = 0;
  for (Real v : x.data()) total += v;
  const Real n = Real(x.numel());
  return finish<Real>(x.tape(), Shape{}, std::vector<Real>{total / n},
                      [x, n](std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> gx(x.numel(), g[0] / n);
                        t.accumulate(x.node(), gx);
                      });
}

template <typename Real>
Tensor<Real> mean_rows(const Tensor<Real>& x) {
  require_rank(x.shape(), 2, "mean_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<Real> out(cols, Real(0));
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += xv[r * cols + c];
  for (auto& v : out) v /= Real(rows);
  return finish<Real>(x.tape(), Shape{1, cols}, std::move(out),
                      [x, rows, cols](std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> gx(rows * cols);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] = g[c] / Real(rows);
                        t.accumulate(x.node(), gx);
                      });
}

template <typename Real>
Tensor<Real> normalize_sum(const Tensor<Real>& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  if (!(total > Real(0)) || !std::isfinite(total)) throw NumericalError("normalize_sum: non-positive total");
  std::vector<Real> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / total;
  if (!x.requires_grad()) return Tensor<Real>(x.shape(), std::move(out));
  auto y = std::make_shared<std::vector<Real>>(out);
  return x.tape()->record(x.shape(), std::move(out), [x, y, total](std::span<const Real> g, Tape<Real>& t) {
    Real dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * (*y)[i];
    std::vector<Real> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = (g[i] - dot) / total;
    t.accumulate(x.node(), gx);
  });
}

template <typename Real>
Tensor<Real> cross_entropy_logits(const Tensor<Real>& logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "cross_entropy_logits");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw UsageError("cross_entropy_logits: label count mismatch");
  auto z = logits.data();
  std::vector<Real> probs(batch * classes);
  Real loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw UsageError("cross_entropy_logits: label out of range");
    }
    const Real* row = z.data() + b * classes;
    Real mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    Real total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - mx);
    const Real lse = mx + std::log(total);
    loss += lse - row[labels[b]];
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] = std::exp(row[c] - lse);
  }
  loss /= Real(batch);
  std::vector<int> y(labels.begin(), labels.end());
  return finish<Real>(logits.tape(), Shape{}, std::vector<Real>{loss},
                      [logits, probs = std::move(probs), y = std::move(y), batch, classes](
                          std::span<const Real> g, Tape<Real>& t) {
                        std::vector<Real> gz(batch * classes);
                        for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t c = 0; c < classes; ++c) {
                            const Real target = static_cast<int>(c) == y[b] ? Real(1) : Real(0);
                            gz[b * classes + c] = g[0] * (probs[b * classes + c] - target) / Real(batch);
                          }
                        t.accumulate(logits.node(), gz);
                      });
}

std::vector<std::size_t> patchify_index(const std::array<std::size_t, 4>& extents,
                                        const std::array<std::size_t, 3>& patch) {
  const auto [C, D, H, W] = extents;
  const auto [pd, ph, pw] = patch;
  if (pd == 0 || ph == 0 || pw == 0 || D % pd || H % ph || W % pw) {
    throw UsageError("patchify: extents not divisible by patch size");
  }
  const std::size_t nd = D / pd, nh = H / ph, nw = W / pw;
  std::vector<std::size_t> index;
  index.reserve(C * D * H * W);
  for (std::size_t bd = 0; bd < nd; ++bd)
    for (std::size_t bh = 0; bh < nh; ++bh)
      for (std::size_t bw = 0; bw < nw; ++bw)
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t z = 0; z < pd; ++z)
            for (std::size_t y = 0; y < ph; ++y)
              for (std::size_t x = 0; x < pw; ++x) {
                const std::size_t d = bd * pd + z, h = bh * ph + y, w = bw * pw + x;
                index.push_back(((c * D + d) * H + h) * W + w);
              }
  return index;
}

template <typename Real>
Tensor<Real> patchify(const Tensor<Real>& x, const std::array<std::size_t, 3>& patch) {
  require_rank(x.shape(), 4, "patchify");
  const std::array<std::size_t, 4> ext{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  const auto index = patchify_index(ext, patch);
  const std::size_t per_patch = ext[0] * patch[0] * patch[1] * patch[2];
  return gather(x, index, Shape{index.size() / per_patch, per_patch});
}

#define GUIDED_ATTN_INSTANTIATE_OPS(Real)                                                                 \
  template Tensor<Real> add(const Tensor<Real>&, const Tensor<Real>&);                                   \
  template Tensor<Real> sub(const Tensor<Real>&, const Tensor<Real>&);                                   \
  template Tensor<Real> mul(const Tensor<Real>&, const Tensor<Real>&);                                   \
  template Tensor<Real> scale(const Tensor<Real>&, Real);                                                \
  template Tensor<Real> square(const Tensor<Real>&);                                                     \
  template Tensor<Real> add_bias(const Tensor<Real>&, const Tensor<Real>&);                              \
  template Tensor<Real> matmul(const Tensor<Real>&, const Tensor<Real>&);                                \
  template Tensor<Real> matmul_nt(const Tensor<Real>&, const Tensor<Real>&);                             \
  template Tensor<Real> transpose(const Tensor<Real>&);                                                  \
  template Tensor<Real> reshape(const Tensor<Real>&, Shape);                                             \
  template Tensor<Real> gather(const Tensor<Real>&, std::span<const std::size_t>, Shape);                \
  template Tensor<Real> narrow_cols(const Tensor<Real>&, std::size_t, std::size_t);                      \
  template Tensor<Real> concat_cols(std::span<const Tensor<Real>>);                                      \
  template Tensor<Real> concat_rows(std::span<const Tensor<Real>>);                                      \
  template Tensor<Real> layer_norm(const Tensor<Real>&, const Tensor<Real>&, const Tensor<Real>&, Real); \
  template Tensor<Real> gelu(const Tensor<Real>&);                                                       \
  template Tensor<Real> softmax(const Tensor<Real>&, std::size_t);                                       \
  template Tensor<Real> sum(const Tensor<Real>&);                                                        \
  template Tensor<Real> mean(const Tensor<Real>&);                                                       \
  template Tensor<Real> mean_rows(const Tensor<Real>&);                                                  \
  template Tensor<Real> normalize_sum(const Tensor<Real>&);                                              \
  template Tensor<Real> cross_entropy_logits(const Tensor<Real>&, std::span<const int>);                 \
  template Tensor<Real> patchify(const Tensor<Real>&, const std::array<std::size_t, 3>&);

GUIDED_ATTN_INSTANTIATE_OPS(float)
GUIDED_ATTN_INSTANTIATE_OPS(double)

}  // namespace guided_attn::numcore
