// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each op computes its forward value eagerly and,
// when any input requires grad, appends a record to the tape whose closure
// accumulates input gradients from the output gradient.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "prefixmtl/numerics/tensor.hpp"
#include "prefixmtl/random.hpp"

namespace prefixmtl::ops {

namespace detail {

template <typename Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <typename Real>
using CMapMat = Eigen::Map<const RowMat<Real>>;
using Stride = Eigen::OuterStride<>;
template <typename Real>
using StridedMat = Eigen::Map<RowMat<Real>, 0, Stride>;
template <typename Real>
using CStridedMat = Eigen::Map<const RowMat<Real>, 0, Stride>;

template <typename Real>
CMapMat<Real> cmat(const Tensor<Real>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<Real>(t.data().data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename Real>
MapMat<Real> mat(std::span<Real> s, std::size_t rows, std::size_t cols) {
  return MapMat<Real>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw Error(ErrorCode::kShapeMismatch, std::string(op) + ": " + shape_string(a) + " vs " + shape_string(b));
}

template <typename Real>
void check_finite([[maybe_unused]] const char* op, [[maybe_unused]] const Tensor<Real>& t) {
#ifndef NDEBUG
  if (!all_finite<Real>(t.data())) throw Error(ErrorCode::kNonFinite, std::string(op) + " produced a non-finite value");
#endif
}

struct AxisSlices {
  std::size_t outer, n, inner;
};

inline AxisSlices axis_slices(const Shape& shape, std::size_t axis) {
  AxisSlices s{1, shape.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// a[..., K] x b[K, N] -> [..., N]; with transpose_b, b is [N, K].
template <typename Real>
Tensor<Real> matmul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b, bool transpose_b = false) {
  using namespace detail;
  if (b.rank() != 2) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t k = a.cols();
  const std::size_t m = a.rows();
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (bk != k) shape_mismatch("matmul", a.shape(), b.shape());

  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<Real> out(out_shape);
  auto A = cmat(a, m, k);
  auto C = mat(out.data(), m, n);
  if (transpose_b) {
    C.noalias() = A * cmat(b, n, k).transpose();
  } else {
    C.noalias() = A * cmat(b, k, n);
  }
  check_finite("matmul", out);

  if (tape.wants(a, b)) {
    tape.record(out, [a = a, b = b, out, m, k = k, n, transpose_b]() mutable {
      auto dC = CMapMat<Real>(out.grad().data(), m, n);
      if (a.requires_grad()) {
        auto dA = mat(a.grad(), m, k);
        if (transpose_b) dA.noalias() += dC * cmat(b, n, k);
        else dA.noalias() += dC * cmat(b, k, n).transpose();
      }
      if (b.requires_grad()) {
        if (transpose_b) mat(b.grad(), n, k).noalias() += dC.transpose() * cmat(a, m, k);
        else mat(b.grad(), k, n).noalias() += cmat(a, m, k).transpose() * dC;
      }
    });
  }
  return out;
}

/// Elementwise sum. b may also be a vector matching a's trailing dimension,
/// in which case it is broadcast over rows.
template <typename Real>
Tensor<Real> add(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool same = a.shape() == b.shape();
  const bool row_broadcast = !same && b.rank() == 1 && b.size() == a.cols();
  if (!same && !row_broadcast) detail::shape_mismatch("add", a.shape(), b.shape());
  Tensor<Real> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  } else {
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i % c];
  }
  detail::check_finite("add", out);
  if (tape.wants(a, b)) {
    tape.record(out, [a = a, b = b, out, same]() mutable {
      auto g = std::span<const Real>(out.grad());
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        if (same) {
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        } else {
          const std::size_t c = gb.size();
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
        }
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> mul(Tape<Real>& tape, const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.shape() != b.shape()) detail::shape_mismatch("mul", a.shape(), b.shape());
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  detail::check_finite("mul", out);
  if (tape.wants(a, b)) {
    tape.record(out, [a = a, b = b, out]() mutable {
      auto g = std::span<const Real>(out.grad());
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> scale(Tape<Real>& tape, const Tensor<Real>& a, Real c) {
  Tensor<Real> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
  detail::check_finite("scale", out);
  if (tape.wants(a)) {
    tape.record(out, [a = a, out, c]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> sum(Tape<Real>& tape, const Tensor<Real>& a) {
  Real total = 0;
  for (Real v : a.data()) total += v;
  Tensor<Real> out = Tensor<Real>::scalar(total);
  if (tape.wants(a)) {
    tape.record(out, [a = a, out]() mutable {
      const Real g = out.grad()[0];
      for (Real& ga : a.grad()) ga += g;
    });
  }
  return out;
}

/// Copy with a new shape of the same element count.
template <typename Real>
Tensor<Real> reshape(Tape<Real>& tape, const Tensor<Real>& a, Shape shape) {
  if (shape_size(shape) != a.size()) detail::shape_mismatch("reshape", a.shape(), shape);
  Tensor<Real> out = Tensor<Real>::from(std::move(shape), a.values());
  if (tape.wants(a)) {
    tape.record(out, [a = a, out]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename Real>
Tensor<Real> softmax(Tape<Real>& tape, const Tensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank()) detail::shape_mismatch("softmax", x.shape(), Shape{axis});
  const auto [outer, n, inner] = detail::axis_slices(x.shape(), axis);
  Tensor<Real> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      Real z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  }
  detail::check_finite("softmax", out);
  if (tape.wants(x)) {
    tape.record(out, [x = x, out, outer, n, inner]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto gx = x.grad();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * n * inner + i;
          Real dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * out[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t p = base + j * inner;
            gx[p] += out[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Normalizes each slice along `axis` to zero mean and unit variance, then
/// applies the per-feature affine gamma * xhat + beta (gamma, beta sized
/// shape[axis]).
template <typename Real>
Tensor<Real> layer_norm(Tape<Real>& tape, const Tensor<Real>& x, const Tensor<Real>& gamma,
                        const Tensor<Real>& beta, std::size_t axis, Real eps) {
  if (axis >= x.rank()) detail::shape_mismatch("layer_norm", x.shape(), Shape{axis});
  const auto [outer, n, inner] = detail::axis_slices(x.shape(), axis);
  if (gamma.size() != n || beta.size() != n) detail::shape_mismatch("layer_norm", x.shape(), gamma.shape());
  if (!(eps > 0)) throw Error(ErrorCode::kInvalidArgument, "layer_norm eps must be positive");

  Tensor<Real> out(x.shape());
  std::vector<Real> xhat(x.size());
  std::vector<Real> rstd(outer * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      Real mean = 0;
      for (std::size_t j = 0; j < n; ++j) mean += x[base + j * inner];
      mean /= Real(n);
      Real var = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Real d = x[base + j * inner] - mean;
        var += d * d;
      }
      var /= Real(n);
      const Real r = Real(1) / std::sqrt(var + eps);
      rstd[o * inner + i] = r;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t p = base + j * inner;
        xhat[p] = (x[p] - mean) * r;
        out[p] = gamma[j] * xhat[p] + beta[j];
      }
    }
  }
  detail::check_finite("layer_norm", out);
  if (tape.wants(x, gamma, beta)) {
    tape.record(out, [x = x, gamma = gamma, beta = beta, out, xhat = std::move(xhat), rstd = std::move(rstd), outer, n, inner]() mutable {
      auto g = std::span<const Real>(out.grad());
      const bool need_x = x.requires_grad();
      std::span<Real> gx = need_x ? x.grad() : std::span<Real>{};
      std::span<Real> gg = gamma.requires_grad() ? gamma.grad() : std::span<Real>{};
      std::span<Real> gb = beta.requires_grad() ? beta.grad() : std::span<Real>{};
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * n * inner + i;
          Real mean_d = 0, mean_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t p = base + j * inner;
            const Real d = g[p] * gamma[j];
            mean_d += d;
            mean_dx += d * xhat[p];
            if (!gg.empty()) gg[j] += g[p] * xhat[p];
            if (!gb.empty()) gb[j] += g[p];
          }
          if (!need_x) continue;
          mean_d /= Real(n);
          mean_dx /= Real(n);
          const Real r = rstd[o * inner + i];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t p = base + j * inner;
            gx[p] += r * (g[p] * gamma[j] - mean_d - xhat[p] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

/// Exact (erf) GELU.
template <typename Real>
Tensor<Real> gelu(Tape<Real>& tape, const Tensor<Real>& x) {
  constexpr Real kInvSqrt2 = Real(0.70710678118654752440);
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = Real(0.5) * x[i] * (Real(1) + std::erf(x[i] * kInvSqrt2));
  detail::check_finite("gelu", out);
  if (tape.wants(x)) {
    tape.record(out, [x = x, out]() mutable {
      constexpr Real kInvSqrt2Pi = Real(0.39894228040143267794);
      auto g = std::span<const Real>(out.grad());
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real v = x[i];
        const Real cdf = Real(0.5) * (Real(1) + std::erf(v * kInvSqrt2));
        const Real pdf = kInvSqrt2Pi * std::exp(Real(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

/// Rows of `table` gathered by id: [ids.size(), table.cols()].
template <typename Real>
Tensor<Real> embedding_lookup(Tape<Real>& tape, const Tensor<Real>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) detail::shape_mismatch("embedding_lookup", table.shape(), Shape{ids.size()});
  const std::size_t v = table.dim(0), h = table.dim(1);
  Tensor<Real> out({ids.size(), h});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= v) {
      throw Error(ErrorCode::kInvalidArgument, "embedding id " + std::to_string(ids[r]) + " outside table of " +
                                                   std::to_string(v) + " rows");
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[r] * h), h,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * h));
  }
  if (tape.wants(table)) {
    tape.record(out, [table = table, out, ids = std::vector<std::int32_t>(ids.begin(), ids.end()), h]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto gt = table.grad();
      for (std::size_t r = 0; r < ids.size(); ++r) {
        Real* dst = gt.data() + static_cast<std::size_t>(ids[r]) * h;
        const Real* src = g.data() + r * h;
        for (std::size_t c = 0; c < h; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

/// Inverted dropout. With p == 0 the input handle is returned unchanged.
template <typename Real>
Tensor<Real> dropout(Tape<Real>& tape, const Tensor<Real>& x, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw Error(ErrorCode::kInvalidArgument, "dropout p must lie in [0,1)");
  if (p == 0.0) return x;
  const Real keep_scale = Real(1.0 / (1.0 - p));
  std::vector<Real> mask(x.size());
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng.bernoulli(p) ? Real(0) : keep_scale;
    out[i] = x[i] * mask[i];
  }
  if (tape.wants(x)) {
    tape.record(out, [x = x, out, mask = std::move(mask)]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

/// Mean over rows of -log softmax(logits)[target]. Rank-1 logits are a
/// single row.
template <typename Real>
Tensor<Real> cross_entropy(Tape<Real>& tape, const Tensor<Real>& logits, std::span<const std::int32_t> targets) {
  const std::size_t c = logits.cols();
  const std::size_t n = logits.rows();
  if (targets.size() != n) detail::shape_mismatch("cross_entropy", logits.shape(), Shape{targets.size()});
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "cross_entropy over zero rows");
  std::vector<Real> probs(logits.size());
  Real total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= c) {
      throw Error(ErrorCode::kInvalidArgument, "cross_entropy target " + std::to_string(targets[r]) +
                                                   " outside [0," + std::to_string(c) + ")");
    }
    const Real* row = logits.data().data() + r * c;
    Real mx = *std::max_element(row, row + c);
    Real z = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(row[j] - mx);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    total += std::log(z) + mx - row[targets[r]];
  }
  Tensor<Real> out = Tensor<Real>::scalar(total / Real(n));
  detail::check_finite("cross_entropy", out);
  if (tape.wants(logits)) {
    tape.record(out, [logits = logits, out, probs = std::move(probs), tg = std::vector<std::int32_t>(targets.begin(), targets.end()), n, c]() mutable {
      const Real g = out.grad()[0] / Real(n);
      auto gl = logits.grad();
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < c; ++j) gl[r * c + j] += g * probs[r * c + j];
        gl[r * c + static_cast<std::size_t>(tg[r])] -= g;
      }
    });
  }
  return out;
}

/// Replaces entries whose mask byte is non-zero with `value`; those entries
/// receive no gradient.
template <typename Real>
Tensor<Real> masked_fill(Tape<Real>& tape, const Tensor<Real>& x, std::span<const std::uint8_t> mask, Real value) {
  if (mask.size() != x.size()) detail::shape_mismatch("masked_fill", x.shape(), Shape{mask.size()});
  Tensor<Real> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = mask[i] ? value : x[i];
  if (tape.wants(x)) {
    tape.record(out, [x = x, out, m = std::vector<std::uint8_t>(mask.begin(), mask.end())]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!m[i]) gx[i] += g[i];
    });
  }
  return out;
}

/// Gathers rows of a matrix: [rows.size(), x.cols()].
template <typename Real>
Tensor<Real> select_rows(Tape<Real>& tape, const Tensor<Real>& x, std::span<const std::size_t> rows) {
  const std::size_t c = x.cols();
  Tensor<Real> out({rows.size(), c});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.rows()) throw Error(ErrorCode::kInvalidArgument, "select_rows index out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(rows[r] * c), c,
                out.data().begin() + static_cast<std::ptrdiff_t>(r * c));
  }
  if (tape.wants(x)) {
    tape.record(out, [x = x, out, idx = std::vector<std::size_t>(rows.begin(), rows.end()), c]() mutable {
      auto g = std::span<const Real>(out.grad());
      auto gx = x.grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) gx[idx[r] * c + j] += g[r * c + j];
    });
  }
  return out;
}

/// Multi-head scaled dot-product attention over a packed batch.
/// q, k, v are [batch*len, hidden]; key_valid has batch*len bytes and keys
/// whose byte is zero receive exactly zero attention weight.
template <typename Real>
Tensor<Real> attention(Tape<Real>& tape, const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       std::span<const std::uint8_t> key_valid, std::size_t batch, std::size_t len,
                       std::size_t heads) {
  using namespace detail;
  const std::size_t hidden = q.cols();
  if (q.shape() != k.shape() || q.shape() != v.shape()) shape_mismatch("attention", q.shape(), k.shape());
  if (q.rows() != batch * len || key_valid.size() != batch * len || heads == 0 || hidden % heads != 0) {
    shape_mismatch("attention", q.shape(), Shape{batch, len, heads});
  }
  const std::size_t dh = hidden / heads;
  const Real inv_sqrt = Real(1) / std::sqrt(Real(dh));
  const auto L = static_cast<Eigen::Index>(len);
  const auto D = static_cast<Eigen::Index>(dh);
  const Stride stride(static_cast<Eigen::Index>(hidden));

  Tensor<Real> out({batch * len, hidden});
  // attention weights per (batch, head): len x len
  std::vector<Real> probs(batch * heads * len * len, Real(0));
  RowMat<Real> scores(L, L);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* valid = key_valid.data() + b * len;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * len * hidden + h * dh;
      CStridedMat<Real> Q(q.data().data() + off, L, D, stride);
      CStridedMat<Real> K(k.data().data() + off, L, D, stride);
      CStridedMat<Real> V(v.data().data() + off, L, D, stride);
      StridedMat<Real> O(out.data().data() + off, L, D, stride);
      scores.noalias() = Q * K.transpose();
      MapMat<Real> P(probs.data() + (b * heads + h) * len * len, L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        Real mx = -std::numeric_limits<Real>::infinity();
        for (Eigen::Index j = 0; j < L; ++j)
          if (valid[j]) mx = std::max(mx, scores(i, j) * inv_sqrt);
        Real z = 0;
        for (Eigen::Index j = 0; j < L; ++j) {
          if (!valid[j]) continue;
          const Real e = std::exp(scores(i, j) * inv_sqrt - mx);
          P(i, j) = e;
          z += e;
        }
        for (Eigen::Index j = 0; j < L; ++j) P(i, j) /= z;
      }
      O.noalias() = P * V;
    }
  }
  check_finite("attention", out);

  if (tape.wants(q, k, v)) {
    tape.record(out, [q = q, k = k, v = v, out, probs = std::move(probs), batch, len, heads, hidden, dh, inv_sqrt]() mutable {
      const auto L = static_cast<Eigen::Index>(len);
      const auto D = static_cast<Eigen::Index>(dh);
      const Stride stride(static_cast<Eigen::Index>(hidden));
      std::span<Real> gq = q.requires_grad() ? q.grad() : std::span<Real>{};
      std::span<Real> gk = k.requires_grad() ? k.grad() : std::span<Real>{};
      std::span<Real> gv = v.requires_grad() ? v.grad() : std::span<Real>{};
      RowMat<Real> dP(L, L), dS(L, L);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = b * len * hidden + h * dh;
          CStridedMat<Real> Q(q.data().data() + off, L, D, stride);
          CStridedMat<Real> K(k.data().data() + off, L, D, stride);
          CStridedMat<Real> V(v.data().data() + off, L, D, stride);
          CStridedMat<Real> dO(out.grad().data() + off, L, D, stride);
          CMapMat<Real> P(probs.data() + (b * heads + h) * len * len, L, L);
          if (!gv.empty()) StridedMat<Real>(gv.data() + off, L, D, stride).noalias() += P.transpose() * dO;
          dP.noalias() = dO * V.transpose();
          for (Eigen::Index i = 0; i < L; ++i) {
            Real dot = 0;
            for (Eigen::Index j = 0; j < L; ++j) dot += dP(i, j) * P(i, j);
            for (Eigen::Index j = 0; j < L; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
          }
          if (!gq.empty()) StridedMat<Real>(gq.data() + off, L, D, stride).noalias() += dS * K;
          if (!gk.empty()) StridedMat<Real>(gk.data() + off, L, D, stride).noalias() += dS.transpose() * Q;
        }
      }
    });
  }
  return out;
}

}  // namespace prefixmtl::ops
