#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "mixflow/common/types.hpp"

namespace mixflow::nn {

class Tape;

// Handle to a matrix-valued node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Reverse-mode tape over dense matrices. Only the primitives declared below
// can be recorded; mixing handles from different tapes is rejected.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that receives a gradient.
  Var leaf(Matrix value);
  // Leaf treated as a constant (no gradient is accumulated into it).
  Var constant(Matrix value);

  const Matrix& value(Var v) const;
  const Matrix& grad(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Internal recording hook used by the primitives in this header.
  using Backward = std::function<void(Tape&, std::size_t self)>;
  Var record(Matrix value, std::vector<std::size_t> parents, Backward back);
  Matrix& grad_ref(std::size_t id) { return nodes_[id].grad; }
  const Matrix& value_ref(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  void check_owner(Var v) const;

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Backward back;
  };
  std::vector<Node> nodes_;
};

// --- primitives -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
// a (n x k) + row (1 x k) broadcast over rows.
Var add_row(Var a, Var row);
// Repeats a 1 x k row n times.
Var broadcast_rows(Var row, Eigen::Index n);
Var matmul(Var a, Var b);
// a * b^T; the layout used by dense layers (weights stored out x in).
Var matmul_nt(Var a, Var b);
// Elementwise product with a constant mask (dropout).
Var mask_mul(Var a, const Matrix& mask);
Var relu(Var a);
Var tanh(Var a);
Var silu(Var a);
Var concat_cols(Var a, Var b);
// Row-major reshape (a 1 x (I*D) head output becomes I x D).
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var softmax_rows(Var logits);
// softmax((logits + noise) / temperature) per row; noise is constant.
Var gumbel_softmax_rows(Var logits, const Matrix& noise, double temperature);
// out(s, :) = sum_i w(s, i) * noise(s, i*D .. i*D+D-1); noise is constant.
Var mix_rows(Var weights, const Matrix& noise, Eigen::Index dim);
// Mean over rows of the squared row norm: (1/n) * sum ||a_s||^2.
Var mean_sq_norm(Var a);
Var sum(Var a);
// sum(a .* c) for a constant c.
Var dot_const(Var a, const Matrix& c);

}  // namespace mixflow::nn
