#include "gridgnn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gridgnn/rng.hpp"

namespace gridgnn {

namespace {

[[noreturn]] void input_error(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void write_exact(std::ofstream& f, const void* p, std::size_t len) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
}

void read_exact(std::ifstream& f, void* p, std::size_t len, const std::string& path,
                const char* what) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
  if (static_cast<std::size_t>(f.gcount()) != len)
    input_error(path + ": truncated while reading " + what + " at offset " +
                std::to_string(static_cast<long long>(f.tellg())));
}

void check_magic(std::ifstream& f, const char expect[4], const std::string& path) {
  char magic[4];
  read_exact(f, magic, 4, path, "magic");
  if (std::memcmp(magic, expect, 4) != 0)
    input_error(path + ": magic mismatch at offset 0, expected " +
                std::string(expect, 4));
}

std::uint64_t read_u64(std::ifstream& f, const std::string& path, const char* what) {
  std::uint64_t v;
  read_exact(f, &v, sizeof v, path, what);
  return v;
}

}  // namespace

CsrMatrix normalize_adjacency(const std::vector<std::pair<index_t, index_t>>& edges,
                              index_t n) {
  if (n <= 0) input_error("normalize_adjacency: n must be positive");

  // Symmetrize, dedup, drop input self-loops; then add exactly one self-loop
  // per vertex.
  std::vector<std::pair<index_t, index_t>> und;
  und.reserve(edges.size() * 2 + static_cast<std::size_t>(n));
  for (auto [u, v] : edges) {
    if (u < 0 || u >= n || v < 0 || v >= n)
      input_error("normalize_adjacency: vertex id out of range");
    if (u == v) continue;
    und.emplace_back(u, v);
    und.emplace_back(v, u);
  }
  for (index_t v = 0; v < n; ++v) und.emplace_back(v, v);
  std::sort(und.begin(), und.end());
  und.erase(std::unique(und.begin(), und.end()), und.end());

  std::vector<index_t> degree(static_cast<std::size_t>(n), 0);
  for (auto [u, v] : und) ++degree[static_cast<std::size_t>(u)];

  CsrMatrix a;
  a.n_rows = a.n_cols = n;
  a.row_ptr.assign(static_cast<std::size_t>(n) + 1, 0);
  a.col_idx.reserve(und.size());
  a.values.reserve(und.size());
  index_t row = 0;
  for (auto [u, v] : und) {
    while (row < u) a.row_ptr[static_cast<std::size_t>(++row)] = a.nnz();
    a.col_idx.push_back(v);
    a.values.push_back(1.0 / std::sqrt(static_cast<double>(degree[static_cast<std::size_t>(u)]) *
                                       static_cast<double>(degree[static_cast<std::size_t>(v)])));
  }
  while (row < n) a.row_ptr[static_cast<std::size_t>(++row)] = a.nnz();
  return a;
}

Dataset generate_synthetic(index_t n, double avg_degree, index_t d_in,
                           index_t n_classes, std::uint64_t seed) {
  if (n < 1) input_error("generate_synthetic: n must be >= 1");
  if (avg_degree < 0) input_error("generate_synthetic: avg_degree must be >= 0");
  if (n_classes < 2) input_error("generate_synthetic: n_classes must be >= 2");
  if (n_classes > n) input_error("generate_synthetic: n_classes > n");

  const auto edges = synthetic_edges(n, avg_degree, seed);

  Dataset ds;
  ds.adjacency = normalize_adjacency(edges, n);
  ds.n = n;
  ds.d_in = d_in;
  ds.n_classes = n_classes;

  rng::Stream feat_rng(rng::hash_combine(seed, 0xfea7));
  ds.features.resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(d_in));
  for (auto& x : ds.features) x = static_cast<float>(feat_rng.next_normal());

  // Degree-quantile classes: vertices sorted by (degree, id), split into
  // n_classes equal buckets.
  std::vector<index_t> degree(static_cast<std::size_t>(n), 0);
  for (index_t v = 0; v < n; ++v)
    degree[static_cast<std::size_t>(v)] =
        ds.adjacency.row_ptr[v + 1] - ds.adjacency.row_ptr[v] - 1;  // minus self-loop
  std::vector<index_t> order(static_cast<std::size_t>(n));
  for (index_t v = 0; v < n; ++v) order[static_cast<std::size_t>(v)] = v;
  std::stable_sort(order.begin(), order.end(), [&](index_t a, index_t b) {
    return std::pair(degree[static_cast<std::size_t>(a)], a) <
           std::pair(degree[static_cast<std::size_t>(b)], b);
  });
  ds.labels.resize(static_cast<std::size_t>(n));
  for (index_t i = 0; i < n; ++i) {
    const auto cls = static_cast<std::int32_t>((i * n_classes) / n);
    ds.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = cls;
  }

  // 60/20/20 split from a per-vertex hash.
  ds.split.resize(static_cast<std::size_t>(n));
  const std::uint64_t split_key = rng::hash_combine(seed, 0x5b11);
  for (index_t v = 0; v < n; ++v) {
    const double u = rng::element_unit(split_key, static_cast<std::uint64_t>(v), 0);
    ds.split[static_cast<std::size_t>(v)] =
        u < 0.6 ? SplitTag::kTrain : (u < 0.8 ? SplitTag::kVal : SplitTag::kTest);
  }
  return ds;
}

std::vector<std::pair<index_t, index_t>> synthetic_edges(index_t n, double avg_degree,
                                                         std::uint64_t seed) {
  if (n < 1) input_error("synthetic_edges: n must be >= 1");
  if (avg_degree < 0) input_error("synthetic_edges: avg_degree must be >= 0");
  rng::Stream edge_rng(rng::hash_combine(seed, 0xe0e0));
  const auto target_edges =
      static_cast<std::uint64_t>(avg_degree * static_cast<double>(n) / 2.0);
  std::vector<std::pair<index_t, index_t>> edges;
  edges.reserve(target_edges);
  if (n > 1) {
    for (std::uint64_t e = 0; e < target_edges; ++e) {
      auto u = static_cast<index_t>(edge_rng.next_below(static_cast<std::uint64_t>(n)));
      auto v = static_cast<index_t>(edge_rng.next_below(static_cast<std::uint64_t>(n)));
      if (u != v) edges.emplace_back(u, v);
    }
  }
  return edges;
}

std::vector<std::pair<index_t, index_t>> load_edge_list(const std::string& path,
                                                        index_t* n_out) {
  std::ifstream f(path);
  if (!f) input_error(path + ": cannot open");
  std::vector<std::pair<index_t, index_t>> edges;
  index_t max_id = -1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    index_t u, v;
    if (!(ls >> u)) continue;  // blank or comment-only line
    if (!(ls >> v))
      input_error(path + ": line " + std::to_string(lineno) + ": expected 'u v'");
    if (u < 0 || v < 0)
      input_error(path + ": line " + std::to_string(lineno) + ": negative vertex id");
    edges.emplace_back(u, v);
    max_id = std::max({max_id, u, v});
  }
  if (n_out) *n_out = max_id + 1;
  return edges;
}

Dataset load_dataset(const std::string& graph_path, const std::string& feature_path,
                     const std::string& label_path, const std::string& split_path) {
  Dataset ds;

  {
    std::ifstream f(feature_path, std::ios::binary);
    if (!f) input_error(feature_path + ": cannot open");
    check_magic(f, "SGNF", feature_path);
    ds.n = static_cast<index_t>(read_u64(f, feature_path, "n"));
    ds.d_in = static_cast<index_t>(read_u64(f, feature_path, "d_in"));
    ds.features.resize(static_cast<std::size_t>(ds.n) * static_cast<std::size_t>(ds.d_in));
    read_exact(f, ds.features.data(), ds.features.size() * sizeof(float), feature_path,
               "feature rows");
  }

  {
    std::ifstream f(label_path, std::ios::binary);
    if (!f) input_error(label_path + ": cannot open");
    check_magic(f, "SGNL", label_path);
    const auto n = static_cast<index_t>(read_u64(f, label_path, "n"));
    if (n != ds.n)
      input_error(label_path + ": length mismatch, n=" + std::to_string(n) +
                  " vs features n=" + std::to_string(ds.n));
    ds.n_classes = static_cast<index_t>(read_u64(f, label_path, "n_classes"));
    ds.labels.resize(static_cast<std::size_t>(n));
    read_exact(f, ds.labels.data(), ds.labels.size() * sizeof(std::int32_t), label_path,
               "class ids");
    for (index_t v = 0; v < n; ++v) {
      const auto c = ds.labels[static_cast<std::size_t>(v)];
      if (c < 0 || c >= ds.n_classes)
        input_error(label_path + ": class id out of range at offset " +
                    std::to_string(20 + v * 4));
    }
  }

  {
    std::ifstream f(split_path, std::ios::binary);
    if (!f) input_error(split_path + ": cannot open");
    check_magic(f, "SGNS", split_path);
    const auto n = static_cast<index_t>(read_u64(f, split_path, "n"));
    if (n != ds.n)
      input_error(split_path + ": length mismatch, n=" + std::to_string(n));
    std::vector<std::uint8_t> tags(static_cast<std::size_t>(n));
    read_exact(f, tags.data(), tags.size(), split_path, "split tags");
    ds.split.resize(static_cast<std::size_t>(n));
    for (index_t v = 0; v < n; ++v) {
      if (tags[static_cast<std::size_t>(v)] > 3)
        input_error(split_path + ": invalid split tag at offset " +
                    std::to_string(12 + v));
      ds.split[static_cast<std::size_t>(v)] =
          static_cast<SplitTag>(tags[static_cast<std::size_t>(v)]);
    }
  }

  auto edges = load_edge_list(graph_path, nullptr);
  for (auto [u, v] : edges)
    if (u >= ds.n || v >= ds.n)
      input_error(graph_path + ": vertex id >= n=" + std::to_string(ds.n));
  ds.adjacency = normalize_adjacency(edges, ds.n);
  ds.adjacency.validate();
  return ds;
}

void save_edge_list(const std::string& path,
                    const std::vector<std::pair<index_t, index_t>>& edges) {
  std::ofstream f(path);
  if (!f) input_error(path + ": cannot open for writing");
  for (auto [u, v] : edges) f << u << ' ' << v << '\n';
}

void save_features(const std::string& path, index_t n, index_t d_in,
                   const std::vector<float>& features) {
  std::ofstream f(path, std::ios::binary);
  if (!f) input_error(path + ": cannot open for writing");
  write_exact(f, "SGNF", 4);
  const auto un = static_cast<std::uint64_t>(n), ud = static_cast<std::uint64_t>(d_in);
  write_exact(f, &un, 8);
  write_exact(f, &ud, 8);
  write_exact(f, features.data(), features.size() * sizeof(float));
}

void save_labels(const std::string& path, index_t n, index_t n_classes,
                 const std::vector<std::int32_t>& labels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) input_error(path + ": cannot open for writing");
  write_exact(f, "SGNL", 4);
  const auto un = static_cast<std::uint64_t>(n), uc = static_cast<std::uint64_t>(n_classes);
  write_exact(f, &un, 8);
  write_exact(f, &uc, 8);
  write_exact(f, labels.data(), labels.size() * sizeof(std::int32_t));
}

void save_split(const std::string& path, const std::vector<SplitTag>& split) {
  std::ofstream f(path, std::ios::binary);
  if (!f) input_error(path + ": cannot open for writing");
  write_exact(f, "SGNS", 4);
  const auto un = static_cast<std::uint64_t>(split.size());
  write_exact(f, &un, 8);
  for (SplitTag t : split) {
    const auto b = static_cast<std::uint8_t>(t);
    write_exact(f, &b, 1);
  }
}

}  // namespace gridgnn
