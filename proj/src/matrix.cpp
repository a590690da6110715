#include "n2n/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace n2n {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

bool DenseMatrix::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

SparseRows SparseRows::from_dense(const DenseMatrix& m) {
  SparseRows s;
  s.rows = m.rows();
  s.cols = m.cols();
  s.offsets.resize(s.rows + 1, 0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (m(i, j) != 0.0) {
        s.col_idx.push_back(j);
        s.vals.push_back(m(i, j));
      }
    }
    s.offsets[i + 1] = s.col_idx.size();
  }
  return s;
}

DenseMatrix SparseRows::to_dense() const {
  DenseMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
      m(i, col_idx[k]) = vals[k];
    }
  }
  return m;
}

SparseRows SparseRows::gather(const std::vector<std::size_t>& row_ids) const {
  SparseRows s;
  s.rows = row_ids.size();
  s.cols = cols;
  s.offsets.resize(s.rows + 1, 0);
  std::size_t total = 0;
  for (std::size_t r : row_ids) total += offsets[r + 1] - offsets[r];
  s.col_idx.reserve(total);
  s.vals.reserve(total);
  for (std::size_t i = 0; i < row_ids.size(); ++i) {
    const std::size_t r = row_ids[i];
    for (std::size_t k = offsets[r]; k < offsets[r + 1]; ++k) {
      s.col_idx.push_back(col_idx[k]);
      s.vals.push_back(vals[k]);
    }
    s.offsets[i + 1] = s.col_idx.size();
  }
  return s;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  DenseMatrix c(m, n);
  // i-k-j order: the inner loop streams rows of b, and each output element
  // is accumulated in ascending-k order by exactly one thread.
  constexpr std::size_t kb_size = 128;
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t kb = 0; kb < k; kb += kb_size) {
      const std::size_t kend = std::min(k, kb + kb_size);
      for (std::size_t kk = kb; kk < kend; ++kk) {
        const double aik = a(i, kk);
        if (aik == 0.0) continue;
        const double* bk = b.data() + kk * n;
#pragma omp simd
        for (std::size_t j = 0; j < n; ++j) ci[j] += aik * bk[j];
      }
    }
  }
  return c;
}

DenseMatrix matmul_serial(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  DenseMatrix c(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += a(i, kk) * b(kk, j);
      c(i, j) = acc;
    }
  }
  return c;
}

DenseMatrix transpose(const DenseMatrix& a) {
  DenseMatrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  }
  return t;
}

DenseMatrix add(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.same_shape(b), "add: shape mismatch");
  DenseMatrix c = a;
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < c.size(); ++i) pc[i] += pb[i];
  return c;
}

DenseMatrix sub(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.same_shape(b), "sub: shape mismatch");
  DenseMatrix c = a;
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < c.size(); ++i) pc[i] -= pb[i];
  return c;
}

DenseMatrix scale(const DenseMatrix& a, double c) {
  DenseMatrix r = a;
  for (std::size_t i = 0; i < r.size(); ++i) r.data()[i] *= c;
  return r;
}

DenseMatrix hadamard(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.same_shape(b), "hadamard: shape mismatch");
  DenseMatrix c = a;
  const double* pb = b.data();
  double* pc = c.data();
  for (std::size_t i = 0; i < c.size(); ++i) pc[i] *= pb[i];
  return c;
}

DenseMatrix column_center(const DenseMatrix& h) {
  const std::size_t n = h.rows(), d = h.cols();
  require(n > 0, "column_center: empty matrix");
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mu[j] += h(i, j);
  }
  for (double& v : mu) v /= static_cast<double>(n);
  DenseMatrix c(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) c(i, j) = h(i, j) - mu[j];
  }
  return c;
}

DenseMatrix covariance(const DenseMatrix& h, double eps) {
  require(h.rows() > 0, "covariance: no rows");
  const std::size_t n = h.rows(), d = h.cols();
  DenseMatrix centered = column_center(h);
  DenseMatrix c = matmul(transpose(centered), centered);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) c(i, j) *= inv_n;
    c(i, i) += eps;
  }
  return c;
}

DenseMatrix row_l2_normalized(const DenseMatrix& h) {
  DenseMatrix r = h;
  for (std::size_t i = 0; i < h.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < h.cols(); ++j) s += h(i, j) * h(i, j);
    if (s == 0.0) continue;  // zero rows stay zero
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t j = 0; j < h.cols(); ++j) r(i, j) *= inv;
  }
  return r;
}

double frobenius_distance(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.same_shape(b), "frobenius_distance: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require(a.same_shape(b), "max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

void save_snapshot(const DenseMatrix& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
  std::ofstream shape(path + ".shape");
  shape << m.rows() << ' ' << m.cols() << '\n';
}

DenseMatrix load_snapshot(const std::string& path) {
  std::ifstream shape(path + ".shape");
  if (!shape) throw std::invalid_argument("missing shape file " + path + ".shape");
  std::size_t rows = 0, cols = 0;
  shape >> rows >> cols;
  if (rows == 0 || cols == 0) throw std::invalid_argument("bad shape file " + path + ".shape");
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("missing snapshot " + path);
  DenseMatrix m(rows, cols);
  std::string line;
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(in, line)) {
      throw std::invalid_argument("snapshot " + path + ": too few rows");
    }
    std::stringstream ss(line);
    std::string cell;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!std::getline(ss, cell, ',')) {
        throw std::invalid_argument("snapshot " + path + ": short row " + std::to_string(i));
      }
      m(i, j) = std::stod(cell);
    }
  }
  if (!m.all_finite()) throw std::invalid_argument("snapshot " + path + ": non-finite value");
  return m;
}

}  // namespace n2n
