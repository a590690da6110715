#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "n2n/rng.hpp"

namespace n2n {

// Row-major dense matrix of 64-bit reals. The training path and every test
// oracle run in double precision.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

  static DenseMatrix identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static DenseMatrix random_uniform(std::size_t rows, std::size_t cols,
                                    double lo, double hi, RngStream& rng) {
    DenseMatrix m(rows, cols);
    for (double& v : m.values_) v = rng.uniform(lo, hi);
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  bool all_finite() const;
  bool same_shape(const DenseMatrix& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const DenseMatrix& a, const DenseMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.values_ == b.values_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

// Per-row compressed sparse storage used for large, mostly-zero inputs
// (bag-of-words features, adjacency-as-features). Dense inputs round-trip
// through it unchanged.
struct SparseRows {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;  // length rows+1
  std::vector<std::size_t> col_idx;
  std::vector<double> vals;

  static SparseRows from_dense(const DenseMatrix& m);
  DenseMatrix to_dense() const;
  SparseRows gather(const std::vector<std::size_t>& row_ids) const;
  std::size_t nnz() const { return vals.size(); }
};

// Kernels. `matmul` parallelizes over output rows with a fixed per-element
// accumulation order, so results are reproducible run to run at any thread
// count; `matmul_serial` is the reference implementation kept for tests and
// the kernel benchmark.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix matmul_serial(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& a);
DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix scale(const DenseMatrix& a, double c);
DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b);

// C = (1/N) (H - 1 mu^T)^T (H - 1 mu^T) + eps I, mu the column mean.
DenseMatrix covariance(const DenseMatrix& h, double eps);

DenseMatrix column_center(const DenseMatrix& h);
DenseMatrix row_l2_normalized(const DenseMatrix& h);

double frobenius_distance(const DenseMatrix& a, const DenseMatrix& b);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);

// Matrix snapshot: headerless CSV of values next to a one-line "rows cols"
// shape file at <path>.shape.
void save_snapshot(const DenseMatrix& m, const std::string& path);
DenseMatrix load_snapshot(const std::string& path);

}  // namespace n2n
