#include "n2n/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace n2n {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

RowGroups RowGroups::build(std::vector<std::vector<std::size_t>> lists,
                           std::size_t input_rows) {
  RowGroups g;
  g.lists = std::move(lists);
  g.input_rows = input_rows;
  g.contributors.resize(input_rows);
  for (std::size_t i = 0; i < g.lists.size(); ++i) {
    const auto& l = g.lists[i];
    if (l.empty()) continue;
    const double w = 1.0 / static_cast<double>(l.size());
    for (std::size_t t : l) {
      if (t >= input_rows) throw std::invalid_argument("RowGroups: row id out of range");
      g.contributors[t].emplace_back(i, w);
    }
  }
  return g;
}

Var Tape::emplace(DenseMatrix value, std::vector<int> inputs, BackFn back) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = any_requires(inputs);
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

bool Tape::any_requires(const std::vector<int>& ids) const {
  for (int id : ids) {
    if (nodes_[id].requires_grad) return true;
  }
  return false;
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("invalid tape handle");
  }
  return nodes_[v.id];
}

Var Tape::input(DenseMatrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(DenseMatrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const DenseMatrix& Tape::value(Var v) const { return node(v).value; }

const DenseMatrix& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.requires_grad) throw std::invalid_argument("grad of a non-differentiable node");
  if (n.grad.empty()) {
    static thread_local DenseMatrix zeros;
    zeros = DenseMatrix(n.value.rows(), n.value.cols());
    return zeros;
  }
  return n.grad;
}

double Tape::scalar(Var v) const {
  const DenseMatrix& m = value(v);
  require(m.rows() == 1 && m.cols() == 1, "scalar: node is not 1x1");
  return m(0, 0);
}

DenseMatrix& Tape::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = DenseMatrix(n.value.rows(), n.value.cols());
  return n.grad;
}

const DenseMatrix& Tape::out_grad(int id) { return grad_ref(id); }

Var Tape::matmul(Var a, Var b) {
  DenseMatrix y = n2n::matmul(value(a), value(b));
  return emplace(std::move(y), {a.id, b.id}, [a, b](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    if (t.nodes_[a.id].requires_grad) {
      DenseMatrix ga = n2n::matmul(gy, n2n::transpose(t.value(b)));
      DenseMatrix& acc = t.grad_ref(a.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += ga.data()[i];
    }
    if (t.nodes_[b.id].requires_grad) {
      DenseMatrix gb = n2n::matmul(n2n::transpose(t.value(a)), gy);
      DenseMatrix& acc = t.grad_ref(b.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gb.data()[i];
    }
  });
}

Var Tape::add(Var a, Var b) {
  DenseMatrix y = n2n::add(value(a), value(b));
  return emplace(std::move(y), {a.id, b.id}, [a, b](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    for (int id : {a.id, b.id}) {
      if (!t.nodes_[id].requires_grad) continue;
      DenseMatrix& acc = t.grad_ref(id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gy.data()[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  DenseMatrix y = n2n::sub(value(a), value(b));
  return emplace(std::move(y), {a.id, b.id}, [a, b](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    if (t.nodes_[a.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(a.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gy.data()[i];
    }
    if (t.nodes_[b.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(b.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] -= gy.data()[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  DenseMatrix y = n2n::scale(value(a), c);
  return emplace(std::move(y), {a.id}, [a, c](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += c * gy.data()[i];
  });
}

Var Tape::add_const(Var a, DenseMatrix k) {
  DenseMatrix y = n2n::add(value(a), k);
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gy.data()[i];
  });
}

Var Tape::hadamard(Var a, Var b) {
  DenseMatrix y = n2n::hadamard(value(a), value(b));
  return emplace(std::move(y), {a.id, b.id}, [a, b](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    if (t.nodes_[a.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(a.id);
      const DenseMatrix& vb = t.value(b);
      for (std::size_t i = 0; i < acc.size(); ++i)
        acc.data()[i] += gy.data()[i] * vb.data()[i];
    }
    if (t.nodes_[b.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(b.id);
      const DenseMatrix& va = t.value(a);
      for (std::size_t i = 0; i < acc.size(); ++i)
        acc.data()[i] += gy.data()[i] * va.data()[i];
    }
  });
}

Var Tape::relu(Var a) {
  DenseMatrix y = value(a);
  for (std::size_t i = 0; i < y.size(); ++i) y.data()[i] = std::max(0.0, y.data()[i]);
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    const DenseMatrix& x = t.value(a);
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      if (x.data()[i] > 0.0) acc.data()[i] += gy.data()[i];
    }
  });
}

Var Tape::transpose(Var a) {
  DenseMatrix y = n2n::transpose(value(a));
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    DenseMatrix gt = n2n::transpose(t.out_grad(out));
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gt.data()[i];
  });
}

Var Tape::column_center(Var a) {
  DenseMatrix y = n2n::column_center(value(a));
  // Centering is self-adjoint: the backward pass centers the gradient.
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    DenseMatrix gc = n2n::column_center(t.out_grad(out));
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gc.data()[i];
  });
}

Var Tape::row_l2_normalize(Var a) {
  DenseMatrix y = n2n::row_l2_normalized(value(a));
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    const DenseMatrix& x = t.value(a);
    const DenseMatrix& y = t.nodes_[out].value;
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      double norm_sq = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) norm_sq += x(i, j) * x(i, j);
      if (norm_sq == 0.0) continue;  // zero rows have zero gradient
      const double inv_norm = 1.0 / std::sqrt(norm_sq);
      double dot = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) dot += gy(i, j) * y(i, j);
      for (std::size_t j = 0; j < x.cols(); ++j) {
        acc(i, j) += (gy(i, j) - dot * y(i, j)) * inv_norm;
      }
    }
  });
}

Var Tape::col_l2_normalize(Var a, double eps) {
  const DenseMatrix& x = value(a);
  const std::size_t n = x.rows(), d = x.cols();
  DenseMatrix y(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x(i, j) * x(i, j);
    const double denom = std::max(std::sqrt(s), eps);
    for (std::size_t i = 0; i < n; ++i) y(i, j) = x(i, j) / denom;
  }
  return emplace(std::move(y), {a.id}, [a, eps](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    const DenseMatrix& x = t.value(a);
    const DenseMatrix& y = t.nodes_[out].value;
    DenseMatrix& acc = t.grad_ref(a.id);
    const std::size_t n = x.rows(), d = x.cols();
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += x(i, j) * x(i, j);
      const double norm = std::sqrt(s);
      if (norm <= eps) {
        // Below the guard the map is linear with slope 1/eps.
        for (std::size_t i = 0; i < n; ++i) acc(i, j) += gy(i, j) / eps;
        continue;
      }
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += gy(i, j) * y(i, j);
      for (std::size_t i = 0; i < n; ++i) {
        acc(i, j) += (gy(i, j) - dot * y(i, j)) / norm;
      }
    }
  });
}

Var Tape::batchnorm_cols(Var a, double eps) {
  const DenseMatrix& x = value(a);
  const std::size_t n = x.rows(), d = x.cols();
  require(n >= 2, "batchnorm_cols: need at least 2 rows");
  DenseMatrix y(n, d);
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x(i, j);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) y(i, j) = (x(i, j) - mu) * inv_std;
  }
  return emplace(std::move(y), {a.id}, [a, eps](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    const DenseMatrix& x = t.value(a);
    const DenseMatrix& y = t.nodes_[out].value;
    DenseMatrix& acc = t.grad_ref(a.id);
    const std::size_t n = x.rows(), d = x.cols();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < n; ++i) mu += x(i, j);
      mu *= inv_n;
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) var += (x(i, j) - mu) * (x(i, j) - mu);
      var *= inv_n;
      const double inv_std = 1.0 / std::sqrt(var + eps);
      double sum_g = 0.0, sum_gy = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        sum_g += gy(i, j);
        sum_gy += gy(i, j) * y(i, j);
      }
      for (std::size_t i = 0; i < n; ++i) {
        acc(i, j) += inv_std * (gy(i, j) - inv_n * sum_g - y(i, j) * inv_n * sum_gy);
      }
    }
  });
}

Var Tape::mean(Var a) {
  const DenseMatrix& x = value(a);
  require(x.size() > 0, "mean: empty matrix");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.data()[i];
  DenseMatrix y(1, 1);
  y(0, 0) = s / static_cast<double>(x.size());
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    const double g = t.out_grad(out)(0, 0);
    DenseMatrix& acc = t.grad_ref(a.id);
    const double w = g / static_cast<double>(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += w;
  });
}

Var Tape::trace(Var a) {
  const DenseMatrix& x = value(a);
  require(x.rows() == x.cols(), "trace: matrix not square");
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, i);
  DenseMatrix y(1, 1);
  y(0, 0) = s;
  return emplace(std::move(y), {a.id}, [a](Tape& t, int out) {
    const double g = t.out_grad(out)(0, 0);
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.rows(); ++i) acc(i, i) += g;
  });
}

Var Tape::rsqrt_scalar(Var s) {
  const double x = scalar(s);
  if (!(x > 0.0)) throw std::runtime_error("rsqrt_scalar: input must be positive");
  DenseMatrix y(1, 1);
  y(0, 0) = 1.0 / std::sqrt(x);
  return emplace(std::move(y), {s.id}, [s, x](Tape& t, int out) {
    const double g = t.out_grad(out)(0, 0);
    t.grad_ref(s.id)(0, 0) += g * (-0.5) * std::pow(x, -1.5);
  });
}

Var Tape::mul_scalar(Var a, Var s) {
  const double c = scalar(s);
  DenseMatrix y = n2n::scale(value(a), c);
  return emplace(std::move(y), {a.id, s.id}, [a, s, c](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    if (t.nodes_[a.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(a.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += c * gy.data()[i];
    }
    if (t.nodes_[s.id].requires_grad) {
      const DenseMatrix& va = t.value(a);
      double dot = 0.0;
      for (std::size_t i = 0; i < va.size(); ++i) dot += gy.data()[i] * va.data()[i];
      t.grad_ref(s.id)(0, 0) += dot;
    }
  });
}

Var Tape::div_scalar(Var a, Var s) {
  const double c = scalar(s);
  if (c == 0.0) throw std::runtime_error("div_scalar: division by zero");
  DenseMatrix y = n2n::scale(value(a), 1.0 / c);
  return emplace(std::move(y), {a.id, s.id}, [a, s, c](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    if (t.nodes_[a.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(a.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gy.data()[i] / c;
    }
    if (t.nodes_[s.id].requires_grad) {
      const DenseMatrix& va = t.value(a);
      double dot = 0.0;
      for (std::size_t i = 0; i < va.size(); ++i) dot += gy.data()[i] * va.data()[i];
      t.grad_ref(s.id)(0, 0) += -dot / (c * c);
    }
  });
}

Var Tape::add_row_broadcast(Var a, Var bias_row) {
  const DenseMatrix& x = value(a);
  const DenseMatrix& b = value(bias_row);
  require(b.rows() == 1 && b.cols() == x.cols(), "add_row_broadcast: bias shape");
  DenseMatrix y = x;
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b(0, j);
  }
  return emplace(std::move(y), {a.id, bias_row.id}, [a, bias_row](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    if (t.nodes_[a.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(a.id);
      for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += gy.data()[i];
    }
    if (t.nodes_[bias_row.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(bias_row.id);
      for (std::size_t i = 0; i < gy.rows(); ++i) {
        for (std::size_t j = 0; j < gy.cols(); ++j) acc(0, j) += gy(i, j);
      }
    }
  });
}

Var Tape::dropout(Var a, double rate, RngStream& rng, bool train) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return a;  // identity at eval time
  const DenseMatrix& x = value(a);
  auto mask = std::make_shared<DenseMatrix>(x.rows(), x.cols());
  const double keep = 1.0 - rate;
  const double inv_keep = 1.0 / keep;
  DenseMatrix y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double m = rng.next_double() < keep ? inv_keep : 0.0;
    mask->data()[i] = m;
    y.data()[i] *= m;
  }
  return emplace(std::move(y), {a.id}, [a, mask](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < acc.size(); ++i)
      acc.data()[i] += gy.data()[i] * mask->data()[i];
  });
}

Var Tape::gather_rows(Var a, std::vector<std::size_t> idx) {
  const DenseMatrix& x = value(a);
  DenseMatrix y(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < x.rows(), "gather_rows: index out of range");
    for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(idx[i], j);
  }
  auto ids = std::make_shared<std::vector<std::size_t>>(std::move(idx));
  return emplace(std::move(y), {a.id}, [a, ids](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    DenseMatrix& acc = t.grad_ref(a.id);
    for (std::size_t i = 0; i < ids->size(); ++i) {
      const std::size_t r = (*ids)[i];
      for (std::size_t j = 0; j < gy.cols(); ++j) acc(r, j) += gy(i, j);
    }
  });
}

Var Tape::mean_rows(Var a, std::shared_ptr<const RowGroups> groups) {
  const DenseMatrix& x = value(a);
  require(groups->input_rows == x.rows(), "mean_rows: group table row count");
  const std::size_t d = x.cols();
  const std::size_t out_rows = groups->lists.size();
  DenseMatrix y(out_rows, d);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < out_rows; ++i) {
    const auto& l = groups->lists[i];
    if (l.empty()) continue;  // empty groups yield zero rows
    double* yi = y.data() + i * d;
    for (std::size_t r : l) {
      const double* xr = x.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) yi[j] += xr[j];
    }
    const double w = 1.0 / static_cast<double>(l.size());
    for (std::size_t j = 0; j < d; ++j) yi[j] *= w;
  }
  return emplace(std::move(y), {a.id}, [a, groups](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    DenseMatrix& acc = t.grad_ref(a.id);
    const std::size_t d = gy.cols();
#pragma omp parallel for schedule(static)
    for (std::size_t r = 0; r < groups->contributors.size(); ++r) {
      double* ar = acc.data() + r * d;
      for (const auto& [i, w] : groups->contributors[r]) {
        const double* gr = gy.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) ar[j] += w * gr[j];
      }
    }
  });
}

Var Tape::sparse_affine(std::shared_ptr<const SparseRows> x, Var w, Var bias_row) {
  const DenseMatrix& wm = value(w);
  const DenseMatrix& b = value(bias_row);
  require(x->cols == wm.rows(), "sparse_affine: inner dimensions differ");
  require(b.rows() == 1 && b.cols() == wm.cols(), "sparse_affine: bias shape");
  const std::size_t n = x->rows, d = wm.cols();
  DenseMatrix y(n, d);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    double* yi = y.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) yi[j] = b(0, j);
    for (std::size_t k = x->offsets[i]; k < x->offsets[i + 1]; ++k) {
      const double v = x->vals[k];
      const double* wr = wm.data() + x->col_idx[k] * d;
#pragma omp simd
      for (std::size_t j = 0; j < d; ++j) yi[j] += v * wr[j];
    }
  }
  return emplace(std::move(y), {w.id, bias_row.id}, [x, w, bias_row](Tape& t, int out) {
    const DenseMatrix& gy = t.out_grad(out);
    const std::size_t d = gy.cols();
    if (t.nodes_[w.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(w.id);
      // dW[c,:] += v * dY[i,:] for every stored (i, c, v); the serial row
      // sweep keeps the accumulation order fixed.
      for (std::size_t i = 0; i < x->rows; ++i) {
        const double* gr = gy.data() + i * d;
        for (std::size_t k = x->offsets[i]; k < x->offsets[i + 1]; ++k) {
          const double v = x->vals[k];
          double* wr = acc.data() + x->col_idx[k] * d;
#pragma omp simd
          for (std::size_t j = 0; j < d; ++j) wr[j] += v * gr[j];
        }
      }
    }
    if (t.nodes_[bias_row.id].requires_grad) {
      DenseMatrix& acc = t.grad_ref(bias_row.id);
      for (std::size_t i = 0; i < gy.rows(); ++i) {
        for (std::size_t j = 0; j < d; ++j) acc(0, j) += gy(i, j);
      }
    }
  });
}

Var Tape::softmax_cross_entropy(Var logits,
                                std::shared_ptr<const std::vector<int>> labels,
                                std::shared_ptr<const std::vector<std::size_t>> subset) {
  const DenseMatrix& z = value(logits);
  const std::size_t c = z.cols();
  require(labels->size() == z.rows(), "softmax_cross_entropy: label count");
  require(!subset->empty(), "softmax_cross_entropy: empty subset");
  auto probs = std::make_shared<DenseMatrix>(subset->size(), c);
  double loss = 0.0;
  for (std::size_t s = 0; s < subset->size(); ++s) {
    const std::size_t i = (*subset)[s];
    require(i < z.rows(), "softmax_cross_entropy: subset index out of range");
    const int y = (*labels)[i];
    require(y >= 0 && static_cast<std::size_t>(y) < c,
            "softmax_cross_entropy: label out of range");
    double mx = z(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z(i, j) - mx);
    for (std::size_t j = 0; j < c; ++j) (*probs)(s, j) = std::exp(z(i, j) - mx) / denom;
    loss += std::log(denom) - (z(i, y) - mx);
  }
  DenseMatrix out_v(1, 1);
  out_v(0, 0) = loss / static_cast<double>(subset->size());
  return emplace(std::move(out_v), {logits.id},
                 [logits, labels, subset, probs](Tape& t, int out) {
    const double g = t.out_grad(out)(0, 0);
    DenseMatrix& acc = t.grad_ref(logits.id);
    const double w = g / static_cast<double>(subset->size());
    for (std::size_t s = 0; s < subset->size(); ++s) {
      const std::size_t i = (*subset)[s];
      const int y = (*labels)[i];
      for (std::size_t j = 0; j < acc.cols(); ++j) {
        acc(i, j) += w * ((*probs)(s, j) - (static_cast<int>(j) == y ? 1.0 : 0.0));
      }
    }
  });
}

Var Tape::infonce(Var h, Var a, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("infonce: tau must be positive");
  const DenseMatrix& hv = value(h);
  const DenseMatrix& av = value(a);
  require(hv.same_shape(av), "infonce: shape mismatch");
  require(hv.rows() >= 1, "infonce: empty input");
  const std::size_t n = hv.rows(), d = hv.cols();

  auto hn = std::make_shared<DenseMatrix>(row_l2_normalized(hv));
  auto an = std::make_shared<DenseMatrix>(row_l2_normalized(av));

  // probs[i][k] = softmax over k of cos(h_k, h_i)/tau. Cosines on raw rows;
  // zero rows contribute similarity 0 via the zero normalized row.
  auto probs = std::make_shared<DenseMatrix>(n2n::matmul(*hn, n2n::transpose(*hn)));
  const double inv_tau = 1.0 / tau;
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double* row = probs->data() + i * n;
    double mx = row[0] * inv_tau;
    for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, row[k] * inv_tau);
    double denom = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      row[k] = std::exp(row[k] * inv_tau - mx);
      denom += row[k];
    }
    const double inv_denom = 1.0 / denom;
    for (std::size_t k = 0; k < n; ++k) row[k] *= inv_denom;
    double pos = 0.0;
    for (std::size_t j = 0; j < d; ++j) pos += (*an)(i, j) * (*hn)(i, j);
    loss += std::log(denom) + mx - pos * inv_tau;
  }
  DenseMatrix out_v(1, 1);
  out_v(0, 0) = loss / static_cast<double>(n);

  return emplace(std::move(out_v), {h.id, a.id},
                 [h, a, tau, hn, an, probs](Tape& t, int out) {
    const double g = t.out_grad(out)(0, 0);
    const std::size_t n = hn->rows(), d = hn->cols();
    const double w = g / (static_cast<double>(n) * tau);

    if (t.nodes_[h.id].requires_grad) {
      // Denominator: d/dHn = (P + P^T) Hn; positive term couples an_i.
      DenseMatrix gh = n2n::matmul(*probs, *hn);
      DenseMatrix ght = n2n::matmul(n2n::transpose(*probs), *hn);
      const DenseMatrix& xh = t.value(h);
      DenseMatrix& acc = t.grad_ref(h.id);
      for (std::size_t i = 0; i < n; ++i) {
        double norm_sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm_sq += xh(i, j) * xh(i, j);
        if (norm_sq == 0.0) continue;
        const double inv_norm = 1.0 / std::sqrt(norm_sq);
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double gn = w * (gh(i, j) + ght(i, j) - (*an)(i, j));
          dot += gn * (*hn)(i, j);
        }
        for (std::size_t j = 0; j < d; ++j) {
          const double gn = w * (gh(i, j) + ght(i, j) - (*an)(i, j));
          acc(i, j) += (gn - dot * (*hn)(i, j)) * inv_norm;
        }
      }
    }
    if (t.nodes_[a.id].requires_grad) {
      const DenseMatrix& xa = t.value(a);
      DenseMatrix& acc = t.grad_ref(a.id);
      for (std::size_t i = 0; i < n; ++i) {
        double norm_sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) norm_sq += xa(i, j) * xa(i, j);
        if (norm_sq == 0.0) continue;
        const double inv_norm = 1.0 / std::sqrt(norm_sq);
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += (-w * (*hn)(i, j)) * (*an)(i, j);
        for (std::size_t j = 0; j < d; ++j) {
          acc(i, j) += (-w * (*hn)(i, j) - dot * (*an)(i, j)) * inv_norm;
        }
      }
    }
  });
}

Var Tape::barlow_penalty(Var c, double beta) {
  const DenseMatrix& cm = value(c);
  require(cm.rows() == cm.cols(), "barlow_penalty: matrix not square");
  require(beta >= 0.0, "barlow_penalty: beta must be nonnegative");
  double invariance = 0.0, redundancy = 0.0;
  for (std::size_t i = 0; i < cm.rows(); ++i) {
    for (std::size_t j = 0; j < cm.cols(); ++j) {
      if (i == j) {
        invariance += (1.0 - cm(i, i)) * (1.0 - cm(i, i));
      } else {
        redundancy += cm(i, j) * cm(i, j);
      }
    }
  }
  DenseMatrix out_v(1, 1);
  out_v(0, 0) = invariance + beta * redundancy;
  return emplace(std::move(out_v), {c.id}, [c, beta](Tape& t, int out) {
    const double g = t.out_grad(out)(0, 0);
    const DenseMatrix& cm = t.value(c);
    DenseMatrix& acc = t.grad_ref(c.id);
    for (std::size_t i = 0; i < cm.rows(); ++i) {
      for (std::size_t j = 0; j < cm.cols(); ++j) {
        if (i == j) {
          acc(i, i) += g * (-2.0) * (1.0 - cm(i, i));
        } else {
          acc(i, j) += g * 2.0 * beta * cm(i, j);
        }
      }
    }
  });
}

void Tape::backward(Var loss) {
  if (backward_done_) throw std::runtime_error("Tape::backward called twice");
  backward_done_ = true;
  const Node& ln = node(loss);
  require(ln.value.rows() == 1 && ln.value.cols() == 1, "backward: loss is not scalar");
  if (!ln.requires_grad) return;  // constant loss: all gradients stay zero

  // Restrict the sweep to nodes the loss actually depends on; everything
  // else keeps a zero gradient.
  std::vector<char> needed(nodes_.size(), 0);
  needed[loss.id] = 1;
  for (int id = loss.id; id >= 0; --id) {
    if (!needed[id] || !nodes_[id].requires_grad) continue;
    for (int in : nodes_[id].inputs) needed[in] = 1;
  }
  grad_ref(loss.id)(0, 0) = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!needed[id] || !n.requires_grad || !n.back) continue;
    if (n.grad.empty()) continue;  // no downstream gradient reached this node
    n.back(*this, id);
  }
}

double grad_check(const ValueGradFn& f, const DenseMatrix& x, double h) {
  auto [v0, analytic] = f(x);
  if (!std::isfinite(v0)) throw std::runtime_error("grad_check: non-finite value at x");
  if (!analytic.same_shape(x)) throw std::invalid_argument("grad_check: gradient shape");
  double worst = 0.0;
  DenseMatrix probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double vp = f(probe).first;
    probe.data()[i] = orig - h;
    const double vm = f(probe).first;
    probe.data()[i] = orig;
    if (!std::isfinite(vp) || !std::isfinite(vm)) {
      throw std::runtime_error("grad_check: non-finite perturbed value");
    }
    const double central = (vp - vm) / (2.0 * h);
    const double g = analytic.data()[i];
    worst = std::max(worst, std::abs(g - central) / std::max(1.0, std::abs(g)));
  }
  return worst;
}

}  // namespace n2n
