#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "gridgnn/comm.hpp"
#include "gridgnn/csr.hpp"
#include "gridgnn/grid.hpp"

namespace gridgnn {

/// The pair of grid axes a matrix is 2D-sharded across (unordered).
enum class Plane { XY, YZ, ZX };

/// Ordered sharding layout: rows are block-partitioned along `row`, columns
/// along `col`; the tensor is replicated along the remaining PMM axis. The
/// order distinguishes e.g. (X,Y) from (Y,X), which share the XY plane tag
/// but transpose the intra-plane orientation.
struct Layout {
  Axis row;
  Axis col;
  bool operator==(const Layout&) const = default;
};

inline void validate_layout(Layout l) {
  if (l.row == Axis::D || l.col == Axis::D || l.row == l.col)
    throw std::invalid_argument("Layout: axes must be distinct PMM axes");
}

/// The PMM axis a layout is replicated along.
inline Axis third_axis(Layout l) {
  validate_layout(l);
  // X + Y + Z = 1 + 2 + 3
  return static_cast<Axis>(6 - static_cast<int>(l.row) - static_cast<int>(l.col));
}

inline Plane plane_of(Layout l) {
  switch (third_axis(l)) {
    case Axis::Z: return Plane::XY;
    case Axis::X: return Plane::YZ;
    default: return Plane::ZX;
  }
}

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::XY: return "XY";
    case Plane::YZ: return "YZ";
    default: return "ZX";
  }
}

/// Row-major dense matrix.
template <class Real>
struct Dense {
  index_t rows = 0, cols = 0;
  std::vector<Real> v;

  Dense() = default;
  Dense(index_t r, index_t c)
      : rows(r), cols(c), v(static_cast<std::size_t>(r * c), Real{0}) {}

  Real& at(index_t i, index_t j) { return v[static_cast<std::size_t>(i * cols + j)]; }
  const Real& at(index_t i, index_t j) const {
    return v[static_cast<std::size_t>(i * cols + j)];
  }
  bool operator==(const Dense&) const = default;
};

/// One rank's block of a 2D-sharded global matrix. Row/column partitions are
/// explicit offset vectors because mini-batch rows are split by where the
/// sorted sample intersects the even vertex partition, which is not an even
/// split of the batch.
template <class Real>
struct ShardedTensor {
  Layout layout{Axis::X, Axis::Y};
  index_t g_rows = 0, g_cols = 0;
  std::vector<index_t> row_off;  // dim(layout.row)+1 offsets into [0, g_rows]
  std::vector<index_t> col_off;  // dim(layout.col)+1 offsets into [0, g_cols]
  index_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  Dense<Real> local;

  index_t local_rows() const { return r1 - r0; }
  index_t local_cols() const { return c1 - c0; }
};

/// One rank's CSR block of a 2D-sharded sparse matrix; indices are local.
struct ShardedSparse {
  Layout layout{Axis::Z, Axis::X};
  index_t g_rows = 0, g_cols = 0;
  std::vector<index_t> row_off;
  std::vector<index_t> col_off;
  index_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;
  CsrMatrix local;
};

namespace detail {

inline void check_offsets(const std::vector<index_t>& off, int g, index_t n,
                          const char* what) {
  if (static_cast<int>(off.size()) != g + 1 || off.front() != 0 || off.back() != n)
    throw std::invalid_argument(std::string("ShardedTensor: bad ") + what +
                                " partition offsets");
}

}  // namespace detail

/// Zero-initialized shard of a g_rows x g_cols matrix for the given rank.
template <class Real>
ShardedTensor<Real> make_sharded(const DeviceGrid& grid, const Coord4& coord,
                                 Layout layout, index_t g_rows, index_t g_cols,
                                 std::vector<index_t> row_off,
                                 std::vector<index_t> col_off) {
  validate_layout(layout);
  detail::check_offsets(row_off, grid.dim(layout.row), g_rows, "row");
  detail::check_offsets(col_off, grid.dim(layout.col), g_cols, "col");
  ShardedTensor<Real> t;
  t.layout = layout;
  t.g_rows = g_rows;
  t.g_cols = g_cols;
  const int cr = coord[static_cast<std::size_t>(static_cast<int>(layout.row))];
  const int cc = coord[static_cast<std::size_t>(static_cast<int>(layout.col))];
  t.r0 = row_off[static_cast<std::size_t>(cr)];
  t.r1 = row_off[static_cast<std::size_t>(cr + 1)];
  t.c0 = col_off[static_cast<std::size_t>(cc)];
  t.c1 = col_off[static_cast<std::size_t>(cc + 1)];
  t.row_off = std::move(row_off);
  t.col_off = std::move(col_off);
  t.local = Dense<Real>(t.r1 - t.r0, t.c1 - t.c0);
  return t;
}

/// Shard holding this rank's slice of a fully materialized global matrix.
template <class Real>
ShardedTensor<Real> shard_from_global(const DeviceGrid& grid, const Coord4& coord,
                                      Layout layout, const Dense<Real>& global,
                                      std::vector<index_t> row_off,
                                      std::vector<index_t> col_off) {
  auto t = make_sharded<Real>(grid, coord, layout, global.rows, global.cols,
                              std::move(row_off), std::move(col_off));
  for (index_t i = t.r0; i < t.r1; ++i)
    for (index_t j = t.c0; j < t.c1; ++j) t.local.at(i - t.r0, j - t.c0) = global.at(i, j);
  return t;
}

/// Serial reassembly of per-rank shards into the global matrix; a test helper
/// that bypasses the comm layer. Replicas must agree bit-exactly.
template <class Real>
Dense<Real> assemble_tiles(const DeviceGrid& grid,
                           const std::vector<ShardedTensor<Real>>& per_rank) {
  if (static_cast<int>(per_rank.size()) != grid.total())
    throw std::invalid_argument("assemble_tiles: one shard per rank required");
  const auto& t0 = per_rank.front();
  Dense<Real> out(t0.g_rows, t0.g_cols);
  std::vector<char> seen(static_cast<std::size_t>(t0.g_rows * t0.g_cols), 0);
  for (int r = 0; r < grid.total(); ++r) {
    const auto& t = per_rank[static_cast<std::size_t>(r)];
    for (index_t i = t.r0; i < t.r1; ++i)
      for (index_t j = t.c0; j < t.c1; ++j) {
        auto& cell = out.at(i, j);
        const Real v = t.local.at(i - t.r0, j - t.c0);
        auto& s = seen[static_cast<std::size_t>(i * t.g_cols + j)];
        if (s && cell != v)
          throw std::logic_error("assemble_tiles: replicas disagree");
        cell = v;
        s = 1;
      }
  }
  return out;
}

}  // namespace gridgnn
