#include "gridgnn/sampling.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "gridgnn/rng.hpp"

namespace gridgnn {

SampleSet sample_vertices(index_t n, index_t b, std::uint64_t seed, std::uint64_t step) {
  if (b <= 0 || b > n)
    throw std::invalid_argument("sample_vertices: need 1 <= b <= n");

  // Partial Fisher-Yates: the first b entries of a seeded permutation of [0, n).
  rng::Stream stream(rng::splitmix64(seed + step));
  std::vector<index_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), index_t{0});
  for (index_t i = 0; i < b; ++i) {
    const auto j = i + static_cast<index_t>(
                           stream.next_below(static_cast<std::uint64_t>(n - i)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }

  SampleSet s;
  s.vertices.assign(perm.begin(), perm.begin() + b);
  std::sort(s.vertices.begin(), s.vertices.end());
  s.batch_size = b;
  s.graph_size = n;
  s.seed = seed;
  s.step = step;
  return s;
}

CsrMatrix induce_subgraph(const CsrMatrix& a, const SampleSet& s) {
  const index_t b = s.batch_size;
  CsrMatrix out;
  out.n_rows = out.n_cols = b;
  out.row_ptr.assign(static_cast<std::size_t>(b) + 1, 0);
  for (index_t i = 0; i < b; ++i) {
    const index_t v = s.vertices[static_cast<std::size_t>(i)];
    for (index_t k = a.row_ptr[v]; k < a.row_ptr[v + 1]; ++k) {
      const auto it = std::lower_bound(s.vertices.begin(), s.vertices.end(), a.col_idx[k]);
      if (it != s.vertices.end() && *it == a.col_idx[k]) {
        out.col_idx.push_back(static_cast<index_t>(it - s.vertices.begin()));
        out.values.push_back(a.values[k]);
      }
    }
    out.row_ptr[static_cast<std::size_t>(i) + 1] = out.nnz();
  }
  return out;
}

CsrMatrix rescale_edges(const CsrMatrix& a_s, index_t b, index_t n) {
  if (b < 2)
    throw std::invalid_argument("rescale_edges: batch of one has p = 0");
  if (n <= 1) throw std::invalid_argument("rescale_edges: n must exceed 1");
  const double p = static_cast<double>(b - 1) / static_cast<double>(n - 1);
  CsrMatrix out = a_s;
  for (index_t r = 0; r < out.n_rows; ++r)
    for (index_t k = out.row_ptr[r]; k < out.row_ptr[r + 1]; ++k)
      if (out.col_idx[k] != r) out.values[k] /= p;
  return out;
}

MiniBatch build_minibatch(const Dataset& dataset, index_t b, std::uint64_t seed,
                          std::uint64_t step) {
  if (b < 2 || b > dataset.n)
    throw std::invalid_argument("build_minibatch: need 2 <= b <= N");
  MiniBatch mb;
  mb.sample = sample_vertices(dataset.n, b, seed, step);
  mb.adjacency = rescale_edges(induce_subgraph(dataset.adjacency, mb.sample), b, dataset.n);
  mb.adjacency_t = csr_transpose(mb.adjacency);

  mb.features.resize(static_cast<std::size_t>(b) * static_cast<std::size_t>(dataset.d_in));
  mb.labels.resize(static_cast<std::size_t>(b));
  for (index_t i = 0; i < b; ++i) {
    const index_t v = mb.sample.vertices[static_cast<std::size_t>(i)];
    std::copy_n(dataset.feature_row(v), dataset.d_in,
                mb.features.begin() + static_cast<std::ptrdiff_t>(i * dataset.d_in));
    mb.labels[static_cast<std::size_t>(i)] = dataset.labels[static_cast<std::size_t>(v)];
  }
  return mb;
}

}  // namespace gridgnn
