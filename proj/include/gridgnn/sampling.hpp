#pragma once

#include <cstdint>
#include <vector>

#include "gridgnn/csr.hpp"
#include "gridgnn/dataset.hpp"

namespace gridgnn {

/// A sorted uniform sample of B distinct vertex ids, reproducible from
/// (seed, step, b, n).
struct SampleSet {
  std::vector<index_t> vertices;  // strictly increasing
  index_t batch_size = 0;
  index_t graph_size = 0;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

/// Serial mini-batch: rescaled induced adjacency, its transpose, and the
/// feature/label slices for the sampled vertices.
struct MiniBatch {
  CsrMatrix adjacency;    // B x B, off-diagonal rescaled by 1/p
  CsrMatrix adjacency_t;
  std::vector<float> features;  // B x d_in row-major
  std::vector<std::int32_t> labels;
  SampleSet sample;
};

/// First B entries of a seeded permutation of [0, n), sorted. The per-step
/// seed is seed + step.
SampleSet sample_vertices(index_t n, index_t b, std::uint64_t seed, std::uint64_t step);

/// B x B slice a[s][:, s] with values copied unchanged.
CsrMatrix induce_subgraph(const CsrMatrix& a, const SampleSet& s);

/// Divides off-diagonal values by p = (b-1)/(n-1); diagonal untouched.
CsrMatrix rescale_edges(const CsrMatrix& a_s, index_t b, index_t n);

MiniBatch build_minibatch(const Dataset& dataset, index_t b, std::uint64_t seed,
                          std::uint64_t step);

}  // namespace gridgnn
