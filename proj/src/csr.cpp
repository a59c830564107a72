#include "gridgnn/csr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gridgnn {

void CsrMatrix::validate() const {
  if (n_rows < 0 || n_cols < 0) throw std::logic_error("csr: negative shape");
  if (static_cast<index_t>(row_ptr.size()) != n_rows + 1)
    throw std::logic_error("csr: row_ptr length mismatch");
  if (row_ptr.front() != 0 || row_ptr.back() != nnz())
    throw std::logic_error("csr: row_ptr endpoints");
  if (values.size() != col_idx.size())
    throw std::logic_error("csr: values/col_idx length mismatch");
  for (index_t r = 0; r < n_rows; ++r) {
    if (row_ptr[r] > row_ptr[r + 1]) throw std::logic_error("csr: row_ptr decreasing");
    for (index_t k = row_ptr[r]; k < row_ptr[r + 1]; ++k) {
      if (col_idx[k] < 0 || col_idx[k] >= n_cols)
        throw std::logic_error("csr: column out of range");
      if (k > row_ptr[r] && col_idx[k] <= col_idx[k - 1])
        throw std::logic_error("csr: columns not strictly increasing");
      if (!std::isfinite(values[k])) throw std::logic_error("csr: non-finite value");
    }
  }
}

CsrMatrix csr_from_triples(index_t n_rows, index_t n_cols,
                           const std::vector<index_t>& rows,
                           const std::vector<index_t>& cols,
                           const std::vector<double>& vals) {
  const std::size_t m = rows.size();
  if (cols.size() != m || vals.size() != m)
    throw std::invalid_argument("csr_from_triples: length mismatch");

  CsrMatrix a;
  a.n_rows = n_rows;
  a.n_cols = n_cols;
  a.row_ptr.assign(static_cast<std::size_t>(n_rows) + 1, 0);
  for (std::size_t k = 0; k < m; ++k) {
    if (rows[k] < 0 || rows[k] >= n_rows || cols[k] < 0 || cols[k] >= n_cols)
      throw std::invalid_argument("csr_from_triples: index out of range");
    ++a.row_ptr[static_cast<std::size_t>(rows[k]) + 1];
  }
  std::partial_sum(a.row_ptr.begin(), a.row_ptr.end(), a.row_ptr.begin());

  a.col_idx.resize(m);
  a.values.resize(m);
  std::vector<index_t> cursor(a.row_ptr.begin(), a.row_ptr.end() - 1);
  for (std::size_t k = 0; k < m; ++k) {
    const index_t slot = cursor[static_cast<std::size_t>(rows[k])]++;
    a.col_idx[static_cast<std::size_t>(slot)] = cols[k];
    a.values[static_cast<std::size_t>(slot)] = vals[k];
  }
  // Canonicalize each row by column.
  for (index_t r = 0; r < n_rows; ++r) {
    const index_t lo = a.row_ptr[r], hi = a.row_ptr[r + 1];
    std::vector<std::pair<index_t, double>> row;
    row.reserve(static_cast<std::size_t>(hi - lo));
    for (index_t k = lo; k < hi; ++k) row.emplace_back(a.col_idx[k], a.values[k]);
    std::sort(row.begin(), row.end());
    for (index_t k = lo; k < hi; ++k) {
      if (k > lo && row[static_cast<std::size_t>(k - lo)].first ==
                        row[static_cast<std::size_t>(k - lo - 1)].first)
        throw std::invalid_argument("csr_from_triples: duplicate coordinate");
      a.col_idx[k] = row[static_cast<std::size_t>(k - lo)].first;
      a.values[k] = row[static_cast<std::size_t>(k - lo)].second;
    }
  }
  return a;
}

CsrMatrix csr_transpose(const CsrMatrix& a) {
  CsrMatrix t;
  t.n_rows = a.n_cols;
  t.n_cols = a.n_rows;
  t.row_ptr.assign(static_cast<std::size_t>(a.n_cols) + 1, 0);
  for (index_t c : a.col_idx) ++t.row_ptr[static_cast<std::size_t>(c) + 1];
  std::partial_sum(t.row_ptr.begin(), t.row_ptr.end(), t.row_ptr.begin());

  t.col_idx.resize(a.col_idx.size());
  t.values.resize(a.values.size());
  std::vector<index_t> cursor(t.row_ptr.begin(), t.row_ptr.end() - 1);
  // Row-major traversal emits each transposed row in increasing column order.
  for (index_t r = 0; r < a.n_rows; ++r) {
    for (index_t k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k) {
      const index_t slot = cursor[static_cast<std::size_t>(a.col_idx[k])]++;
      t.col_idx[static_cast<std::size_t>(slot)] = r;
      t.values[static_cast<std::size_t>(slot)] = a.values[k];
    }
  }
  return t;
}

std::vector<double> csr_to_dense(const CsrMatrix& a) {
  std::vector<double> d(static_cast<std::size_t>(a.n_rows) *
                            static_cast<std::size_t>(a.n_cols),
                        0.0);
  for (index_t r = 0; r < a.n_rows; ++r)
    for (index_t k = a.row_ptr[r]; k < a.row_ptr[r + 1]; ++k)
      d[static_cast<std::size_t>(r) * static_cast<std::size_t>(a.n_cols) +
        static_cast<std::size_t>(a.col_idx[k])] = a.values[k];
  return d;
}

}  // namespace gridgnn
