#include "gridgnn/shardsample.hpp"

#include <algorithm>
#include <stdexcept>

namespace gridgnn {

std::vector<index_t> block_partition(index_t n, int g) {
  if (g < 1) throw std::invalid_argument("block_partition: g must be >= 1");
  std::vector<index_t> offsets(static_cast<std::size_t>(g) + 1, 0);
  const index_t base = n / g;
  const index_t extra = n % g;
  for (int k = 0; k < g; ++k)
    offsets[static_cast<std::size_t>(k) + 1] =
        offsets[static_cast<std::size_t>(k)] + base + (k < extra ? 1 : 0);
  return offsets;
}

CsrShard make_csr_shard(const CsrMatrix& a, index_t r0, index_t r1, index_t c0,
                        index_t c1) {
  if (r0 < 0 || r0 > r1 || r1 > a.n_rows || c0 < 0 || c0 > c1 || c1 > a.n_cols)
    throw std::invalid_argument("make_csr_shard: range out of bounds");
  CsrShard sh;
  sh.r0 = r0;
  sh.r1 = r1;
  sh.c0 = c0;
  sh.c1 = c1;
  sh.local.n_rows = r1 - r0;
  sh.local.n_cols = a.n_cols;  // global column ids
  sh.local.row_ptr.assign(static_cast<std::size_t>(r1 - r0) + 1, 0);
  for (index_t r = r0; r < r1; ++r) {
    const index_t lo = std::lower_bound(a.col_idx.begin() + a.row_ptr[r],
                                        a.col_idx.begin() + a.row_ptr[r + 1], c0) -
                       a.col_idx.begin();
    const index_t hi = std::lower_bound(a.col_idx.begin() + a.row_ptr[r],
                                        a.col_idx.begin() + a.row_ptr[r + 1], c1) -
                       a.col_idx.begin();
    sh.local.col_idx.insert(sh.local.col_idx.end(), a.col_idx.begin() + lo,
                            a.col_idx.begin() + hi);
    sh.local.values.insert(sh.local.values.end(), a.values.begin() + lo,
                           a.values.begin() + hi);
    sh.local.row_ptr[static_cast<std::size_t>(r - r0) + 1] = sh.local.nnz();
  }
  return sh;
}

LocalRanges locate_ranges(const SampleSet& s, index_t r0, index_t r1, index_t c0,
                          index_t c1) {
  LocalRanges lr;
  const auto& v = s.vertices;
  lr.row_lo = std::lower_bound(v.begin(), v.end(), r0) - v.begin();
  lr.row_hi = std::lower_bound(v.begin(), v.end(), r1) - v.begin();
  lr.col_lo = std::lower_bound(v.begin(), v.end(), c0) - v.begin();
  lr.col_hi = std::lower_bound(v.begin(), v.end(), c1) - v.begin();
  return lr;
}

Triples extract_rows(const CsrShard& shard, const SampleSet& s, const LocalRanges& lr) {
  const index_t n_sampled = lr.row_hi - lr.row_lo;
  // nnz per sampled row, then inclusive prefix sum.
  std::vector<index_t> prefix(static_cast<std::size_t>(n_sampled));
  index_t total = 0;
  for (index_t i = 0; i < n_sampled; ++i) {
    const index_t v = s.vertices[static_cast<std::size_t>(lr.row_lo + i)];
    const index_t lr_row = v - shard.r0;
    total += shard.local.row_ptr[lr_row + 1] - shard.local.row_ptr[lr_row];
    prefix[static_cast<std::size_t>(i)] = total;
  }

  Triples t;
  t.rows_g.resize(static_cast<std::size_t>(total));
  t.cols_g.resize(static_cast<std::size_t>(total));
  t.vals.resize(static_cast<std::size_t>(total));
  // Ownership mapping: flat index k belongs to the first sampled row whose
  // prefix exceeds k; gather one nonzero per flat index.
  for (index_t k = 0; k < total; ++k) {
    const auto own = static_cast<index_t>(
        std::upper_bound(prefix.begin(), prefix.end(), k) - prefix.begin());
    const index_t within = k - (own > 0 ? prefix[static_cast<std::size_t>(own - 1)] : 0);
    const index_t v = s.vertices[static_cast<std::size_t>(lr.row_lo + own)];
    const index_t pos = shard.local.row_ptr[v - shard.r0] + within;
    t.rows_g[static_cast<std::size_t>(k)] = v;
    t.cols_g[static_cast<std::size_t>(k)] = shard.local.col_idx[pos];
    t.vals[static_cast<std::size_t>(k)] = shard.local.values[pos];
  }
  return t;
}

CompactTriples filter_and_remap(const Triples& t, const SampleSet& s,
                                const LocalRanges& lr, const RemapTable& remap,
                                std::uint64_t step) {
  CompactTriples out;
  const auto col_begin = s.vertices.begin() + lr.col_lo;
  const auto col_end = s.vertices.begin() + lr.col_hi;
  for (std::size_t k = 0; k < t.rows_g.size(); ++k) {
    const index_t j = t.cols_g[k];
    const auto it = std::lower_bound(col_begin, col_end, j);
    if (it == col_end || *it != j) continue;
    const index_t i = t.rows_g[k];
    const index_t ri = remap.lookup(i, step);
    const index_t ci = remap.lookup(j, step);
    out.rows_c.push_back(ri - lr.row_lo);
    out.cols_c.push_back(ci - lr.col_lo);
    out.rows_g.push_back(i);
    out.cols_g.push_back(j);
    out.vals.push_back(t.vals[k]);
  }
  return out;
}

std::pair<CsrMatrix, CsrMatrix> assemble_shard(const CompactTriples& t,
                                               index_t n_loc_rows, index_t n_loc_cols,
                                               index_t b, index_t n) {
  if (b < 2) throw std::invalid_argument("assemble_shard: b must be >= 2");
  if (n <= 1) throw std::invalid_argument("assemble_shard: n must exceed 1");
  const double p = static_cast<double>(b - 1) / static_cast<double>(n - 1);
  std::vector<double> vals = t.vals;
  for (std::size_t k = 0; k < vals.size(); ++k)
    if (t.rows_g[k] != t.cols_g[k]) vals[k] /= p;
  CsrMatrix a = csr_from_triples(n_loc_rows, n_loc_cols, t.rows_c, t.cols_c, vals);
  return {a, csr_transpose(a)};
}

MiniBatchShard build_local_minibatch(const CsrShard& shard, const Dataset& dataset,
                                     index_t b, std::uint64_t seed, std::uint64_t step,
                                     RemapTable& remap) {
  if (b < 2 || b > dataset.n)
    throw std::invalid_argument("build_local_minibatch: need 2 <= b <= N");
  const SampleSet s = sample_vertices(dataset.n, b, seed, step);
  const LocalRanges lr = locate_ranges(s, shard.r0, shard.r1, shard.c0, shard.c1);
  remap.publish(s, step);

  const Triples t = extract_rows(shard, s, lr);
  const CompactTriples ct = filter_and_remap(t, s, lr, remap, step);

  MiniBatchShard mbs;
  mbs.nnz_extracted = t.rows_g.size();
  mbs.nnz_kept = ct.rows_g.size();
  std::tie(mbs.a_loc, mbs.a_t_loc) =
      assemble_shard(ct, lr.row_hi - lr.row_lo, lr.col_hi - lr.col_lo, b, dataset.n);
  mbs.s_r.assign(s.vertices.begin() + lr.row_lo, s.vertices.begin() + lr.row_hi);
  mbs.s_c.assign(s.vertices.begin() + lr.col_lo, s.vertices.begin() + lr.col_hi);
  mbs.row_lo = lr.row_lo;
  mbs.col_lo = lr.col_lo;

  mbs.x_s.resize(mbs.s_r.size() * static_cast<std::size_t>(dataset.d_in));
  mbs.y_s.resize(mbs.s_r.size());
  for (std::size_t i = 0; i < mbs.s_r.size(); ++i) {
    const index_t v = mbs.s_r[i];
    std::copy_n(dataset.feature_row(v), dataset.d_in,
                mbs.x_s.begin() + static_cast<std::ptrdiff_t>(
                                      i * static_cast<std::size_t>(dataset.d_in)));
    mbs.y_s[i] = dataset.labels[static_cast<std::size_t>(v)];
  }
  return mbs;
}

std::vector<index_t> sample_partition(const SampleSet& s,
                                      const std::vector<index_t>& offsets) {
  std::vector<index_t> out(offsets.size());
  for (std::size_t k = 0; k < offsets.size(); ++k)
    out[k] = std::lower_bound(s.vertices.begin(), s.vertices.end(), offsets[k]) -
             s.vertices.begin();
  return out;
}

}  // namespace gridgnn
