#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "n2n/matrix.hpp"
#include "n2n/rng.hpp"

namespace n2n {

// Handle into a Tape. Cheap to copy; only meaningful for the tape that
// produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Precomputed row-aggregation structure: output row i is the mean of the
// input rows in lists[i]. The reverse index makes the backward scatter a
// deterministic parallel loop over input rows.
struct RowGroups {
  std::vector<std::vector<std::size_t>> lists;
  std::size_t input_rows = 0;
  // contributors[t] = (output row, 1/list size) pairs that read input row t.
  std::vector<std::vector<std::pair<std::size_t, double>>> contributors;

  static RowGroups build(std::vector<std::vector<std::size_t>> lists,
                         std::size_t input_rows);
};

// Reverse-mode gradient recorder over DenseMatrix values. Recording order is
// a topological order by construction; backward() replays it once in
// reverse. A tape is confined to one training step on one thread.
class Tape {
 public:
  Var input(DenseMatrix value);  // leaf, no gradient
  Var param(DenseMatrix value);  // leaf with gradient

  const DenseMatrix& value(Var v) const;
  const DenseMatrix& grad(Var v) const;
  double scalar(Var v) const;  // value of a 1x1 node

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double c);
  Var add_const(Var a, DenseMatrix k);
  Var hadamard(Var a, Var b);
  Var relu(Var a);
  Var transpose(Var a);
  Var column_center(Var a);
  Var row_l2_normalize(Var a);
  Var col_l2_normalize(Var a, double eps);
  Var batchnorm_cols(Var a, double eps);
  Var mean(Var a);   // 1x1, mean over all entries
  Var trace(Var a);  // 1x1
  Var rsqrt_scalar(Var s);
  Var mul_scalar(Var a, Var s);
  Var div_scalar(Var a, Var s);
  Var add_row_broadcast(Var a, Var bias_row);
  Var dropout(Var a, double rate, RngStream& rng, bool train);
  Var gather_rows(Var a, std::vector<std::size_t> idx);
  Var mean_rows(Var a, std::shared_ptr<const RowGroups> groups);
  Var sparse_affine(std::shared_ptr<const SparseRows> x, Var w, Var bias_row);
  Var softmax_cross_entropy(Var logits, std::shared_ptr<const std::vector<int>> labels,
                            std::shared_ptr<const std::vector<std::size_t>> subset);
  Var infonce(Var h, Var a, double tau);
  Var barlow_penalty(Var c, double beta);

  // Propagates from a scalar loss. May be called once per tape.
  void backward(Var loss);

  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    DenseMatrix value;
    DenseMatrix grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    std::function<void(Tape&)> back;
  };

  Var emplace(DenseMatrix value, std::vector<int> inputs,
              std::function<void(Tape&)> back);
  bool any_requires(const std::vector<int>& ids) const;
  DenseMatrix& grad_ref(int id);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f returns the loss value and the gradient with respect to x.
using ValueGradFn = std::function<std::pair<double, DenseMatrix>(const DenseMatrix&)>;
double grad_check(const ValueGradFn& f, const DenseMatrix& x, double h = 1e-5);

}  // namespace n2n
