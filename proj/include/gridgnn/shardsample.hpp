#pragma once

#include <cstdint>
#include <vector>

#include "gridgnn/csr.hpp"
#include "gridgnn/dataset.hpp"
#include "gridgnn/sampling.hpp"

namespace gridgnn {

/// Contiguous block partition of n into g blocks, as even as possible; the
/// first n mod g blocks get one extra element. Returns g+1 offsets.
std::vector<index_t> block_partition(index_t n, int g);

/// 2D shard of a global CSR matrix: rows [r0, r1) stored with local row
/// indices, column indices kept GLOBAL within [c0, c1).
struct CsrShard {
  index_t r0 = 0, r1 = 0;
  index_t c0 = 0, c1 = 0;
  CsrMatrix local;  // (r1-r0) x n_cols_global, cols restricted to [c0, c1)
};

CsrShard make_csr_shard(const CsrMatrix& a, index_t r0, index_t r1, index_t c0,
                        index_t c1);

/// Persistent global-id -> sample-rank map with step tagging; entries from
/// earlier steps are never cleared, only invalidated by their tag.
class RemapTable {
 public:
  explicit RemapTable(index_t n)
      : tag_(static_cast<std::size_t>(n), 0), local_(static_cast<std::size_t>(n), 0) {}

  index_t size() const { return static_cast<index_t>(tag_.size()); }

  /// O(B) writes: tags every sampled vertex with `step` and its rank in the
  /// sorted sample.
  void publish(const SampleSet& s, std::uint64_t step) {
    for (index_t i = 0; i < s.batch_size; ++i) {
      const auto v = static_cast<std::size_t>(s.vertices[static_cast<std::size_t>(i)]);
      tag_[v] = step + 1;
      local_[v] = i;
    }
  }

  /// Rank within the sample, or -1 if the entry is stale for `step`.
  index_t lookup(index_t global, std::uint64_t step) const {
    const auto v = static_cast<std::size_t>(global);
    return tag_[v] == step + 1 ? local_[v] : index_t{-1};
  }

 private:
  std::vector<std::uint64_t> tag_;
  std::vector<index_t> local_;
};

/// Local sample ranges: positions of s ∩ [r0,r1) and s ∩ [c0,c1) within the
/// sorted sample.
struct LocalRanges {
  index_t row_lo = 0, row_hi = 0;  // S_r = sample[row_lo, row_hi)
  index_t col_lo = 0, col_hi = 0;  // S_c = sample[col_lo, col_hi)
};

LocalRanges locate_ranges(const SampleSet& s, index_t r0, index_t r1, index_t c0,
                          index_t c1);

/// Flat nonzero triples with global indices (phase 2 output).
struct Triples {
  std::vector<index_t> rows_g;
  std::vector<index_t> cols_g;
  std::vector<double> vals;
};

/// Compact triples; global ids retained for the phase-4 diagonal test.
struct CompactTriples {
  std::vector<index_t> rows_c;  // [0, |S_r|)
  std::vector<index_t> cols_c;  // [0, |S_c|)
  std::vector<index_t> rows_g;
  std::vector<index_t> cols_g;
  std::vector<double> vals;
};

/// Prefix-sum row extraction over the sampled rows of the shard.
Triples extract_rows(const CsrShard& shard, const SampleSet& s, const LocalRanges& lr);

CompactTriples filter_and_remap(const Triples& t, const SampleSet& s,
                                const LocalRanges& lr, const RemapTable& remap,
                                std::uint64_t step);

/// Rescales off-diagonal entries (global row != global col) by 1/p with
/// p = (b-1)/(n-1) and assembles both the local CSR and its transpose.
std::pair<CsrMatrix, CsrMatrix> assemble_shard(const CompactTriples& t,
                                               index_t n_loc_rows, index_t n_loc_cols,
                                               index_t b, index_t n);

/// One rank's shard of the rescaled mini-batch adjacency plus its feature and
/// label slices; assembling all ranks' shards in grid order reproduces the
/// serial MiniBatch exactly.
struct MiniBatchShard {
  CsrMatrix a_loc;    // |S_r| x |S_c|
  CsrMatrix a_t_loc;  // |S_c| x |S_r|
  std::vector<float> x_s;  // |S_r| x d_in row-major
  std::vector<std::int32_t> y_s;
  std::vector<index_t> s_r;
  std::vector<index_t> s_c;
  index_t row_lo = 0;  // position of s_r within the sorted sample
  index_t col_lo = 0;
  std::uint64_t nnz_extracted = 0;
  std::uint64_t nnz_kept = 0;
};

MiniBatchShard build_local_minibatch(const CsrShard& shard, const Dataset& dataset,
                                     index_t b, std::uint64_t seed, std::uint64_t step,
                                     RemapTable& remap);

/// Splits the sorted sample along the given global offsets: result[k] is the
/// position in the sample where block k begins (length offsets.size()).
std::vector<index_t> sample_partition(const SampleSet& s,
                                      const std::vector<index_t>& offsets);

}  // namespace gridgnn
