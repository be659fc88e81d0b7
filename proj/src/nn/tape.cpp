#include "mixflow/nn/tape.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "mixflow/common/error.hpp"

namespace mixflow::nn {

const Matrix& Var::value() const { return tape->value(*this); }
const Matrix& Var::grad() const { return tape->grad(*this); }

Var Tape::leaf(Matrix value) {
  Node n;
  n.grad = Matrix::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Matrix value) {
  Node n;
  n.grad = Matrix::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::check_owner(Var v) const {
  if (v.tape != this || v.id >= nodes_.size())
    throw ValidationError("tape: variable does not belong to this tape");
}

const Matrix& Tape::value(Var v) const {
  check_owner(v);
  return nodes_[v.id].value;
}

const Matrix& Tape::grad(Var v) const {
  check_owner(v);
  return nodes_[v.id].grad;
}

Var Tape::record(Matrix value, std::vector<std::size_t> parents, Backward back) {
  bool needs = false;
  for (std::size_t p : parents) needs = needs || nodes_[p].needs_grad;
  Node n;
  n.grad = Matrix::Zero(value.rows(), value.cols());
  n.value = std::move(value);
  n.needs_grad = needs;
  if (needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  check_owner(loss);
  if (nodes_[loss.id].value.size() != 1)
    throw ShapeError("tape: backward requires a 1x1 loss, got " +
                     shape_string(nodes_[loss.id].value));
  for (auto& n : nodes_) n.grad.setZero();
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (std::size_t k = loss.id + 1; k-- > 0;) {
    if (nodes_[k].back) nodes_[k].back(*this, k);
  }
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw ValidationError("tape: operands recorded on different tapes");
  a.tape->check_owner(a);
  a.tape->check_owner(b);
  return *a.tape;
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw ValidationError("tape: unbound variable");
  a.tape->check_owner(a);
  return *a.tape;
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << op << ": shape mismatch " << shape_string(a) << " vs " << shape_string(b);
    throw ShapeError(os.str());
  }
}

void accumulate(Tape& t, std::size_t id, const Matrix& g) {
  if (t.needs_grad(id)) t.grad_ref(id) += g;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix stable_softmax_rows(const Matrix& z) {
  Matrix out(z.rows(), z.cols());
  constexpr double kFloor = std::numeric_limits<double>::min();
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    double mx = z.row(r).maxCoeff();
    double total = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      out(r, c) = std::exp(z(r, c) - mx);
      total += out(r, c);
    }
    for (Eigen::Index c = 0; c < z.cols(); ++c)
      out(r, c) = std::max(out(r, c) / total, kFloor);
  }
  return out;
}

// Backward of y = softmax(z) per row: dz = y .* (dy - <dy, y>).
Matrix softmax_backward(const Matrix& y, const Matrix& dy) {
  Matrix dz(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    double inner = y.row(r).dot(dy.row(r));
    dz.row(r) = y.row(r).array() * (dy.row(r).array() - inner);
  }
  return dz;
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return t.record(a.value() + b.value(), {a.id, b.id},
                  [a, b](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad_ref(self);
                    accumulate(tp, a.id, g);
                    accumulate(tp, b.id, g);
                  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return t.record(a.value() - b.value(), {a.id, b.id},
                  [a, b](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad_ref(self);
                    accumulate(tp, a.id, g);
                    accumulate(tp, b.id, -g);
                  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  return t.record(a.value() * s, {a.id}, [a, s](Tape& tp, std::size_t self) {
    accumulate(tp, a.id, tp.grad_ref(self) * s);
  });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols())
    throw ShapeError("add_row: expected 1x" + std::to_string(a.cols()) +
                     " row, got " + shape_string(row.value()));
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a.id, row.id},
                  [a, row](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad_ref(self);
                    accumulate(tp, a.id, g);
                    if (tp.needs_grad(row.id)) tp.grad_ref(row.id) += g.colwise().sum();
                  });
}

Var broadcast_rows(Var row, Eigen::Index n) {
  Tape& t = tape_of(row);
  if (row.rows() != 1) throw ShapeError("broadcast_rows: expected a single row");
  Matrix out = row.value().replicate(n, 1);
  return t.record(std::move(out), {row.id}, [row](Tape& tp, std::size_t self) {
    if (tp.needs_grad(row.id)) tp.grad_ref(row.id) += tp.grad_ref(self).colwise().sum();
  });
}

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_string(a.value()) + " * " +
                     shape_string(b.value()));
  return t.record(a.value() * b.value(), {a.id, b.id},
                  [a, b](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad_ref(self);
                    if (tp.needs_grad(a.id))
                      tp.grad_ref(a.id).noalias() += g * tp.value_ref(b.id).transpose();
                    if (tp.needs_grad(b.id))
                      tp.grad_ref(b.id).noalias() += tp.value_ref(a.id).transpose() * g;
                  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.cols())
    throw ShapeError("matmul_nt: " + shape_string(a.value()) + " * (" +
                     shape_string(b.value()) + ")^T");
  return t.record(a.value() * b.value().transpose(), {a.id, b.id},
                  [a, b](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad_ref(self);
                    if (tp.needs_grad(a.id))
                      tp.grad_ref(a.id).noalias() += g * tp.value_ref(b.id);
                    if (tp.needs_grad(b.id))
                      tp.grad_ref(b.id).noalias() += g.transpose() * tp.value_ref(a.id);
                  });
}

Var mask_mul(Var a, const Matrix& mask) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), mask, "mask_mul");
  return t.record(a.value().cwiseProduct(mask), {a.id},
                  [a, mask](Tape& tp, std::size_t self) {
                    accumulate(tp, a.id, tp.grad_ref(self).cwiseProduct(mask));
                  });
}

Var relu(Var a) {
  Tape& t = tape_of(a);
  return t.record(a.value().cwiseMax(0.0), {a.id}, [a](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    const Matrix& x = tp.value_ref(a.id);
    tp.grad_ref(a.id) += (x.array() > 0.0).select(tp.grad_ref(self), 0.0);
  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().array().tanh().matrix();
  return t.record(std::move(y), {a.id}, [a](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    const Matrix& y = tp.value_ref(self);
    tp.grad_ref(a.id).array() += tp.grad_ref(self).array() * (1.0 - y.array().square());
  });
}

Var silu(Var a) {
  Tape& t = tape_of(a);
  Matrix y = a.value().unaryExpr([](double x) { return x * sigmoid(x); });
  return t.record(std::move(y), {a.id}, [a](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    const Matrix& x = tp.value_ref(a.id);
    Matrix d = x.unaryExpr([](double v) {
      double s = sigmoid(v);
      return s * (1.0 + v * (1.0 - s));
    });
    tp.grad_ref(a.id) += tp.grad_ref(self).cwiseProduct(d);
  });
}

Var concat_cols(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.rows() != b.rows())
    throw ShapeError("concat_cols: row mismatch " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
  Matrix out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  Eigen::Index ca = a.cols();
  return t.record(std::move(out), {a.id, b.id},
                  [a, b, ca](Tape& tp, std::size_t self) {
                    const Matrix& g = tp.grad_ref(self);
                    if (tp.needs_grad(a.id)) tp.grad_ref(a.id) += g.leftCols(ca);
                    if (tp.needs_grad(b.id)) tp.grad_ref(b.id) += g.rightCols(g.cols() - ca);
                  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = tape_of(a);
  if (rows * cols != a.value().size())
    throw ShapeError("reshape: cannot view " + shape_string(a.value()) + " as " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  RowMajor src = a.value();
  Matrix out = Eigen::Map<RowMajor>(src.data(), rows, cols);
  Eigen::Index r0 = a.rows(), c0 = a.cols();
  return t.record(std::move(out), {a.id}, [a, r0, c0](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    RowMajor g = tp.grad_ref(self);
    tp.grad_ref(a.id) += Matrix(Eigen::Map<RowMajor>(g.data(), r0, c0));
  });
}

Var softmax_rows(Var logits) {
  Tape& t = tape_of(logits);
  if (!logits.value().allFinite()) throw ValidationError("softmax: non-finite logits");
  return t.record(stable_softmax_rows(logits.value()), {logits.id},
                  [logits](Tape& tp, std::size_t self) {
                    if (!tp.needs_grad(logits.id)) return;
                    tp.grad_ref(logits.id) +=
                        softmax_backward(tp.value_ref(self), tp.grad_ref(self));
                  });
}

Var gumbel_softmax_rows(Var logits, const Matrix& noise, double temperature) {
  Tape& t = tape_of(logits);
  if (!(temperature > 0.0)) throw ValidationError("gumbel_softmax: temperature must be > 0");
  if (!logits.value().allFinite())
    throw ValidationError("gumbel_softmax: non-finite logits");
  require_same_shape(logits.value(), noise, "gumbel_softmax");
  Matrix z = (logits.value() + noise) / temperature;
  return t.record(stable_softmax_rows(z), {logits.id},
                  [logits, temperature](Tape& tp, std::size_t self) {
                    if (!tp.needs_grad(logits.id)) return;
                    tp.grad_ref(logits.id) +=
                        softmax_backward(tp.value_ref(self), tp.grad_ref(self)) / temperature;
                  });
}

Var mix_rows(Var weights, const Matrix& noise, Eigen::Index dim) {
  Tape& t = tape_of(weights);
  const Eigen::Index n = weights.rows(), modes = weights.cols();
  require_shape(noise, n, modes * dim, "mix_rows noise");
  Matrix out = Matrix::Zero(n, dim);
  const Matrix& w = weights.value();
  for (Eigen::Index s = 0; s < n; ++s)
    for (Eigen::Index i = 0; i < modes; ++i)
      out.row(s) += w(s, i) * noise.block(s, i * dim, 1, dim);
  return t.record(std::move(out), {weights.id},
                  [weights, noise, dim](Tape& tp, std::size_t self) {
                    if (!tp.needs_grad(weights.id)) return;
                    const Matrix& g = tp.grad_ref(self);
                    Matrix& gw = tp.grad_ref(weights.id);
                    for (Eigen::Index s = 0; s < gw.rows(); ++s)
                      for (Eigen::Index i = 0; i < gw.cols(); ++i)
                        gw(s, i) += g.row(s).cwiseProduct(noise.block(s, i * dim, 1, dim)).sum();
                  });
}

Var mean_sq_norm(Var a) {
  Tape& t = tape_of(a);
  const double n = static_cast<double>(a.rows());
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm() / n;
  return t.record(std::move(out), {a.id}, [a, n](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    tp.grad_ref(a.id) += tp.value_ref(a.id) * (2.0 * tp.grad_ref(self)(0, 0) / n);
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a.id}, [a](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(a.id)) return;
    tp.grad_ref(a.id).array() += tp.grad_ref(self)(0, 0);
  });
}

Var dot_const(Var a, const Matrix& c) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), c, "dot_const");
  Matrix out(1, 1);
  out(0, 0) = a.value().cwiseProduct(c).sum();
  return t.record(std::move(out), {a.id}, [a, c](Tape& tp, std::size_t self) {
    accumulate(tp, a.id, c * tp.grad_ref(self)(0, 0));
  });
}

}  // namespace mixflow::nn
