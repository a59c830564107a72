#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace gridgnn {

using index_t = std::int64_t;

/// Compressed sparse row matrix in canonical form: row_ptr non-decreasing,
/// column indices strictly increasing within each row, all values finite.
struct CsrMatrix {
  index_t n_rows = 0;
  index_t n_cols = 0;
  std::vector<index_t> row_ptr{0};
  std::vector<index_t> col_idx;
  std::vector<double> values;

  index_t nnz() const { return static_cast<index_t>(col_idx.size()); }

  bool operator==(const CsrMatrix&) const = default;

  void validate() const;
};

/// Builds a canonical CSR matrix from unordered (row, col, value) triples.
/// Duplicate coordinates are a contract violation.
CsrMatrix csr_from_triples(index_t n_rows, index_t n_cols,
                           const std::vector<index_t>& rows,
                           const std::vector<index_t>& cols,
                           const std::vector<double>& vals);

CsrMatrix csr_transpose(const CsrMatrix& a);

/// Dense row-major expansion, for small oracles and tests.
std::vector<double> csr_to_dense(const CsrMatrix& a);

}  // namespace gridgnn
