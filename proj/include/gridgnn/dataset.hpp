#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gridgnn/csr.hpp"

namespace gridgnn {

enum class SplitTag : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2, kUnused = 3 };

/// Immutable training dataset: symmetrically normalized adjacency with
/// self-loops, row-major fp32 features, one class id per vertex, split tags.
struct Dataset {
  CsrMatrix adjacency;            // N x N, D^{-1/2}(A+I)D^{-1/2}
  index_t n = 0;
  index_t d_in = 0;
  index_t n_classes = 0;
  std::vector<float> features;    // n * d_in, row-major
  std::vector<std::int32_t> labels;
  std::vector<SplitTag> split;

  const float* feature_row(index_t v) const {
    return features.data() + static_cast<std::size_t>(v) * static_cast<std::size_t>(d_in);
  }
};

/// D^{-1/2}(A+I)D^{-1/2} over the symmetrized, deduplicated input edges.
/// Self-loops in the input are dropped first so each vertex gets exactly one.
CsrMatrix normalize_adjacency(const std::vector<std::pair<index_t, index_t>>& edges,
                              index_t n);

/// Raw random edge list used by generate_synthetic; exposed so the same
/// graph can be written to disk and reloaded bit-identically.
std::vector<std::pair<index_t, index_t>> synthetic_edges(index_t n, double avg_degree,
                                                         std::uint64_t seed);

Dataset generate_synthetic(index_t n, double avg_degree, index_t d_in,
                           index_t n_classes, std::uint64_t seed);

Dataset load_dataset(const std::string& graph_path, const std::string& feature_path,
                     const std::string& label_path, const std::string& split_path);

/// File writers for the on-disk formats (text edge list, SGNF/SGNL/SGNS).
void save_edge_list(const std::string& path,
                    const std::vector<std::pair<index_t, index_t>>& edges);
void save_features(const std::string& path, index_t n, index_t d_in,
                   const std::vector<float>& features);
void save_labels(const std::string& path, index_t n, index_t n_classes,
                 const std::vector<std::int32_t>& labels);
void save_split(const std::string& path, const std::vector<SplitTag>& split);

std::vector<std::pair<index_t, index_t>> load_edge_list(const std::string& path,
                                                        index_t* n_out);

}  // namespace gridgnn
