#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <type_traits>
#include <vector>

#include "gridgnn/comm.hpp"
#include "gridgnn/rng.hpp"
#include "gridgnn/tensor.hpp"

namespace gridgnn {

// Sharded matrix products follow one contraction rule: with A laid out
// (r, k) and B laid out (k, t), every rank multiplies its local blocks and an
// all-reduce along k completes the sum, leaving the product laid out (r, t)
// and replicated along k. Orientations are ordered pairs, so "the XY plane"
// appears both as (X, Y) and as its transpose (Y, X); the assignments below
// are the unique ones under which the three-layer rotation closes:
//
//   layer 1: A (Z,X) · F (X,Y) -reduce X-> H (Z,Y);  H · W (Y,X) -reduce Y-> (Z,X)
//   layer 2: A (Y,Z) · F (Z,X) -reduce Z-> H (Y,X);  H · W (X,Z) -reduce X-> (Y,Z)
//   layer 3: A (X,Y) · F (Y,Z) -reduce Y-> H (X,Z);  H · W (Z,Y) -reduce Z-> (X,Y)
//
// The input projection is the same rule once more: X_in (X,Z) · W_in (Z,Y)
// reduces along Z and yields (X,Y), the first layer's feature layout.

inline Layout adjacency_layout(int layer) {
  if (layer < 1) throw std::invalid_argument("adjacency_layout: layer must be >= 1");
  switch ((layer - 1) % 3) {
    case 0: return {Axis::Z, Axis::X};
    case 1: return {Axis::Y, Axis::Z};
    default: return {Axis::X, Axis::Y};
  }
}

inline Plane rotation_plane(int layer) { return plane_of(adjacency_layout(layer)); }

/// Layout of the feature matrix entering layer `layer` (layer L+1 gives the
/// layout of the final layer's output).
inline Layout feature_layout(int layer) {
  if (layer < 1) throw std::invalid_argument("feature_layout: layer must be >= 1");
  switch ((layer - 1) % 3) {
    case 0: return {Axis::X, Axis::Y};
    case 1: return {Axis::Z, Axis::X};
    default: return {Axis::Y, Axis::Z};
  }
}

/// The weight multiplying a matrix laid out `h` contracts along h's column
/// axis and produces columns on the remaining axis.
inline Layout weight_layout_for(Layout h) { return {h.col, third_axis(h)}; }

inline Layout hagg_layout(int layer) {
  return {adjacency_layout(layer).row, feature_layout(layer).col};
}

inline Layout weight_layout(int layer) { return weight_layout_for(hagg_layout(layer)); }

inline constexpr Layout kInputFeatureLayout{Axis::X, Axis::Z};

namespace detail {

inline void require(bool ok, const char* msg) {
  if (!ok) throw CommContract(msg);
}

}  // namespace detail

/// Materialized local transpose: layout, ranges, and block all swapped. The
/// local block of the transposed shard is exactly the global transpose's
/// block for this rank.
template <class Real>
ShardedTensor<Real> transposed(const ShardedTensor<Real>& t) {
  ShardedTensor<Real> out;
  out.layout = {t.layout.col, t.layout.row};
  out.g_rows = t.g_cols;
  out.g_cols = t.g_rows;
  out.row_off = t.col_off;
  out.col_off = t.row_off;
  out.r0 = t.c0;
  out.r1 = t.c1;
  out.c0 = t.r0;
  out.c1 = t.r1;
  out.local = Dense<Real>(t.local.cols, t.local.rows);
  for (index_t i = 0; i < t.local.rows; ++i)
    for (index_t j = 0; j < t.local.cols; ++j) out.local.at(j, i) = t.local.at(i, j);
  return out;
}

/// C = A · B with A laid out (r, k) and B laid out (k, t); the partial local
/// product is completed by an all-reduce along k. bf16 payload rounding
/// applies only here and in spmm.
template <class Real>
ShardedTensor<Real> contract(RankComm& rc, const ShardedTensor<Real>& a,
                             const ShardedTensor<Real>& b,
                             Precision prec = Precision::kFp32) {
  detail::require(a.layout.col == b.layout.row, "contract: inner axes differ");
  detail::require(a.g_cols == b.g_rows, "contract: inner dimensions differ");
  detail::require(a.col_off == b.row_off, "contract: inner partitions differ");
  detail::require(a.layout.row != b.layout.col, "contract: output axes collide");
  const index_t kk = a.local_cols();
  detail::require(kk == b.local_rows(), "contract: local inner blocks differ");

  ShardedTensor<Real> c;
  c.layout = {a.layout.row, b.layout.col};
  c.g_rows = a.g_rows;
  c.g_cols = b.g_cols;
  c.row_off = a.row_off;
  c.col_off = b.col_off;
  c.r0 = a.r0;
  c.r1 = a.r1;
  c.c0 = b.c0;
  c.c1 = b.c1;
  c.local = Dense<Real>(a.local_rows(), b.local_cols());
  const index_t m = c.local.rows, n = c.local.cols;
  for (index_t i = 0; i < m; ++i)
    for (index_t k = 0; k < kk; ++k) {
      const Real aik = a.local.at(i, k);
      if (aik == Real{0}) continue;
      const Real* brow = &b.local.at(k, 0);
      Real* crow = &c.local.at(i, 0);
      for (index_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  rc.all_reduce(a.layout.col, std::span<Real>(c.local.v), prec);
  return c;
}

/// H = A · F with a sparse A laid out (r, k) and F laid out (k, t); same
/// contraction rule as `contract`.
template <class Real>
ShardedTensor<Real> spmm(RankComm& rc, const ShardedSparse& a,
                         const ShardedTensor<Real>& f,
                         Precision prec = Precision::kFp32) {
  detail::require(a.layout.col == f.layout.row, "spmm: inner axes differ");
  detail::require(a.g_cols == f.g_rows, "spmm: inner dimensions differ");
  detail::require(a.col_off == f.row_off, "spmm: inner partitions differ");
  detail::require(a.r1 - a.r0 == a.local.n_rows && a.c1 - a.c0 == a.local.n_cols,
                  "spmm: sparse block shape mismatch");
  detail::require(f.local_rows() == a.local.n_cols, "spmm: local inner blocks differ");

  ShardedTensor<Real> h;
  h.layout = {a.layout.row, f.layout.col};
  h.g_rows = a.g_rows;
  h.g_cols = f.g_cols;
  h.row_off = a.row_off;
  h.col_off = f.col_off;
  h.r0 = a.r0;
  h.r1 = a.r1;
  h.c0 = f.c0;
  h.c1 = f.c1;
  h.local = Dense<Real>(a.r1 - a.r0, f.local_cols());
  const index_t n = h.local.cols;
  for (index_t i = 0; i < a.local.n_rows; ++i) {
    Real* hrow = &h.local.at(i, 0);
    for (index_t e = a.local.row_ptr[i]; e < a.local.row_ptr[i + 1]; ++e) {
      const Real v = static_cast<Real>(a.local.values[static_cast<std::size_t>(e)]);
      const Real* frow = &f.local.at(a.local.col_idx[static_cast<std::size_t>(e)], 0);
      for (index_t j = 0; j < n; ++j) hrow[j] += v * frow[j];
    }
  }
  rc.all_reduce(a.layout.col, std::span<Real>(h.local.v), prec);
  return h;
}

/// Full global matrix, reconstructed with an all-gather along the row axis
/// followed by one along the column axis.
template <class Real>
Dense<Real> gather_full(RankComm& rc, const ShardedTensor<Real>& t) {
  // Stack the row blocks of this column range (members of the row-axis group
  // share the column range, so raw concatenation in axis order works).
  auto row_parts = rc.all_gather(t.layout.row, std::span<const Real>(t.local.v));
  const index_t width = t.local_cols();
  std::vector<Real> col_strip;
  col_strip.reserve(static_cast<std::size_t>(t.g_rows * width));
  for (const auto& p : row_parts) col_strip.insert(col_strip.end(), p.begin(), p.end());

  auto col_parts = rc.all_gather(t.layout.col, std::span<const Real>(col_strip));
  Dense<Real> out(t.g_rows, t.g_cols);
  for (std::size_t m = 0; m < col_parts.size(); ++m) {
    const index_t cb0 = t.col_off[m];
    const index_t w = t.col_off[m + 1] - cb0;
    const auto& part = col_parts[m];
    for (index_t i = 0; i < t.g_rows; ++i)
      for (index_t j = 0; j < w; ++j)
        out.at(i, cb0 + j) = part[static_cast<std::size_t>(i * w + j)];
  }
  return out;
}

/// Re-lays a sharded tensor out on a different plane orientation or partition
/// (gather, then slice the new block). A no-op layout returns a copy without
/// communication.
template <class Real>
ShardedTensor<Real> reshard(RankComm& rc, const ShardedTensor<Real>& t, Layout layout,
                            std::vector<index_t> row_off, std::vector<index_t> col_off) {
  if (layout == t.layout && row_off == t.row_off && col_off == t.col_off) return t;
  const Dense<Real> full = gather_full(rc, t);
  return shard_from_global(rc.grid(), rc.coord(), layout, full, std::move(row_off),
                           std::move(col_off));
}

template <class Real>
struct RmsNormResult {
  ShardedTensor<Real> y;
  std::vector<Real> rms;  // one per local row
};

/// y = gamma ⊙ x / rms(x) with rms over the full feature dimension; the
/// sum-of-squares all-reduce runs along the column axis and never in bf16.
template <class Real>
RmsNormResult<Real> parallel_rmsnorm_fwd(RankComm& rc, const ShardedTensor<Real>& x,
                                         std::span<const Real> gamma, Real eps) {
  detail::require(static_cast<index_t>(gamma.size()) == x.local_cols(),
                  "rmsnorm: gamma slice does not match the column block");
  const index_t m = x.local_rows(), n = x.local_cols();
  std::vector<Real> ss(static_cast<std::size_t>(m), Real{0});
  for (index_t i = 0; i < m; ++i) {
    Real s{0};
    for (index_t j = 0; j < n; ++j) {
      const Real v = x.local.at(i, j);
      s += v * v;
    }
    ss[static_cast<std::size_t>(i)] = s;
  }
  rc.all_reduce(x.layout.col, std::span<Real>(ss));
  RmsNormResult<Real> out;
  out.rms.resize(static_cast<std::size_t>(m));
  const Real d = static_cast<Real>(x.g_cols);
  for (index_t i = 0; i < m; ++i)
    out.rms[static_cast<std::size_t>(i)] =
        std::sqrt(ss[static_cast<std::size_t>(i)] / d + eps);
  out.y = x;
  for (index_t i = 0; i < m; ++i) {
    const Real inv = Real{1} / out.rms[static_cast<std::size_t>(i)];
    for (index_t j = 0; j < n; ++j)
      out.y.local.at(i, j) = gamma[static_cast<std::size_t>(j)] * x.local.at(i, j) * inv;
  }
  return out;
}

template <class Real>
struct RmsNormGrads {
  ShardedTensor<Real> dx;
  std::vector<Real> dgamma;  // column-block slice, replicated along the row axis
};

template <class Real>
RmsNormGrads<Real> parallel_rmsnorm_bwd(RankComm& rc, const ShardedTensor<Real>& x,
                                        std::span<const Real> gamma,
                                        const std::vector<Real>& rms,
                                        const ShardedTensor<Real>& dy) {
  const index_t m = x.local_rows(), n = x.local_cols();
  detail::require(static_cast<index_t>(rms.size()) == m, "rmsnorm_bwd: missing cache");
  detail::require(dy.layout == x.layout && dy.r0 == x.r0 && dy.c0 == x.c0,
                  "rmsnorm_bwd: gradient layout mismatch");
  // s_i = sum_j dy_ij * gamma_j * x_ij, needed for the rms path.
  std::vector<Real> s(static_cast<std::size_t>(m), Real{0});
  for (index_t i = 0; i < m; ++i) {
    Real acc{0};
    for (index_t j = 0; j < n; ++j)
      acc += dy.local.at(i, j) * gamma[static_cast<std::size_t>(j)] * x.local.at(i, j);
    s[static_cast<std::size_t>(i)] = acc;
  }
  rc.all_reduce(x.layout.col, std::span<Real>(s));

  RmsNormGrads<Real> out;
  out.dx = x;
  out.dgamma.assign(static_cast<std::size_t>(n), Real{0});
  const Real d = static_cast<Real>(x.g_cols);
  for (index_t i = 0; i < m; ++i) {
    const Real r = rms[static_cast<std::size_t>(i)];
    const Real inv = Real{1} / r;
    const Real coef = s[static_cast<std::size_t>(i)] / (d * r * r * r);
    for (index_t j = 0; j < n; ++j) {
      out.dx.local.at(i, j) =
          gamma[static_cast<std::size_t>(j)] * dy.local.at(i, j) * inv -
          x.local.at(i, j) * coef;
      out.dgamma[static_cast<std::size_t>(j)] += dy.local.at(i, j) * x.local.at(i, j) * inv;
    }
  }
  rc.all_reduce(x.layout.row, std::span<Real>(out.dgamma));
  return out;
}

template <class Real>
struct FusedResult {
  ShardedTensor<Real> out;
  Dense<Real> scale;  // d out / d x per element, cached for backward
};

/// out = dropout(relu(x)) + h_prev in one pass. Inverted dropout scales
/// survivors by 1/(1-rate) during training and is the identity in eval. The
/// mask is a pure function of (mask_key, global coordinates), so replicas of
/// the tensor draw identical masks.
template <class Real>
FusedResult<Real> fused_elementwise_fwd(const ShardedTensor<Real>& x,
                                        std::type_identity_t<const ShardedTensor<Real>*> h_prev,
                                        double rate,
                                        std::uint64_t mask_key, bool training) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("fused_elementwise: dropout rate must be in [0, 1)");
  if (h_prev)
    detail::require(h_prev->layout == x.layout && h_prev->r0 == x.r0 &&
                        h_prev->c0 == x.c0 && h_prev->r1 == x.r1 && h_prev->c1 == x.c1,
                    "fused_elementwise: residual layout mismatch");
  const bool drop = training && rate > 0.0;
  const Real keep_scale = drop ? static_cast<Real>(1.0 / (1.0 - rate)) : Real{1};
  FusedResult<Real> res;
  res.out = x;
  res.scale = Dense<Real>(x.local_rows(), x.local_cols());
  for (index_t i = 0; i < x.local_rows(); ++i)
    for (index_t j = 0; j < x.local_cols(); ++j) {
      Real sc = x.local.at(i, j) > Real{0} ? Real{1} : Real{0};
      if (drop && sc != Real{0})
        sc = rng::element_unit(mask_key, static_cast<std::uint64_t>(x.r0 + i),
                               static_cast<std::uint64_t>(x.c0 + j)) >= rate
                 ? keep_scale
                 : Real{0};
      res.scale.at(i, j) = sc;
      res.out.local.at(i, j) =
          x.local.at(i, j) * sc + (h_prev ? h_prev->local.at(i, j) : Real{0});
    }
  return res;
}

/// d out / d x; the residual gradient is the upstream gradient unchanged.
template <class Real>
ShardedTensor<Real> fused_elementwise_bwd(const ShardedTensor<Real>& dy,
                                          const Dense<Real>& scale) {
  detail::require(scale.rows == dy.local_rows() && scale.cols == dy.local_cols(),
                  "fused_elementwise_bwd: missing cache");
  ShardedTensor<Real> dx = dy;
  for (index_t i = 0; i < dy.local_rows(); ++i)
    for (index_t j = 0; j < dy.local_cols(); ++j)
      dx.local.at(i, j) = dy.local.at(i, j) * scale.at(i, j);
  return dx;
}

template <class Real>
struct CrossEntropyResult {
  Real loss{};  // mean over all batch rows, replicated on every rank
  ShardedTensor<Real> grad_logits;
};

/// Numerically stable mean cross-entropy over class-sharded logits: an
/// all-reduce max then an all-reduce sum along the class axis, both at full
/// precision, then a row-axis reduce of the per-row losses.
template <class Real>
CrossEntropyResult<Real> parallel_cross_entropy(RankComm& rc,
                                                const ShardedTensor<Real>& logits,
                                                const std::vector<std::int32_t>& labels) {
  if (static_cast<index_t>(labels.size()) != logits.g_rows)
    throw std::invalid_argument("cross_entropy: one label per batch row required");
  for (auto y : labels)
    if (y < 0 || static_cast<index_t>(y) >= logits.g_cols)
      throw std::invalid_argument("cross_entropy: label out of range");

  const index_t m = logits.local_rows(), n = logits.local_cols();
  std::vector<Real> mx(static_cast<std::size_t>(m), std::numeric_limits<Real>::lowest());
  for (index_t i = 0; i < m; ++i)
    for (index_t j = 0; j < n; ++j)
      if (logits.local.at(i, j) > mx[static_cast<std::size_t>(i)])
        mx[static_cast<std::size_t>(i)] = logits.local.at(i, j);
  rc.all_reduce_max(logits.layout.col, std::span<Real>(mx));

  // Interleaved per-row [sum of exp, label logit] so one reduce covers both.
  std::vector<Real> zt(static_cast<std::size_t>(2 * m), Real{0});
  for (index_t i = 0; i < m; ++i) {
    Real z{0};
    for (index_t j = 0; j < n; ++j)
      z += std::exp(logits.local.at(i, j) - mx[static_cast<std::size_t>(i)]);
    zt[static_cast<std::size_t>(2 * i)] = z;
    const auto y = static_cast<index_t>(labels[static_cast<std::size_t>(logits.r0 + i)]);
    if (y >= logits.c0 && y < logits.c1)
      zt[static_cast<std::size_t>(2 * i + 1)] = logits.local.at(i, y - logits.c0);
  }
  rc.all_reduce(logits.layout.col, std::span<Real>(zt));

  const Real invb = Real{1} / static_cast<Real>(logits.g_rows);
  std::vector<Real> loss_acc(1, Real{0});
  CrossEntropyResult<Real> res;
  res.grad_logits = logits;
  for (index_t i = 0; i < m; ++i) {
    const Real z = zt[static_cast<std::size_t>(2 * i)];
    const Real lse = mx[static_cast<std::size_t>(i)] + std::log(z);
    loss_acc[0] += lse - zt[static_cast<std::size_t>(2 * i + 1)];
    const auto y = static_cast<index_t>(labels[static_cast<std::size_t>(logits.r0 + i)]);
    for (index_t j = 0; j < n; ++j) {
      Real g = std::exp(logits.local.at(i, j) - mx[static_cast<std::size_t>(i)]) / z;
      if (logits.c0 + j == y) g -= Real{1};
      res.grad_logits.local.at(i, j) = g * invb;
    }
  }
  rc.all_reduce(logits.layout.row, std::span<Real>(loss_acc));
  res.loss = loss_acc[0] * invb;
  return res;
}

}  // namespace gridgnn
