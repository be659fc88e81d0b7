#include <doctest.h>

#include <cmath>
#include <vector>

#include "fd_oracle.hpp"
#include "mixflow/common/error.hpp"
#include "mixflow/nn/gumbel.hpp"
#include "mixflow/nn/mlp.hpp"
#include "mixflow/nn/optimizer.hpp"
#include "mixflow/nn/tape.hpp"

using namespace mixflow;
using namespace mixflow::nn;
using mixflow::testing::central_diff;
using mixflow::testing::rel_error;

namespace {

// Straight-line evaluation of a relu network, written independently of
// mlp_forward_batch.
Vector hand_forward_relu(const MlpParams& p, const Vector& x) {
  std::vector<double> h(x.data(), x.data() + x.size());
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    const Matrix& W = p.weights[l];
    std::vector<double> z(W.rows());
    for (Eigen::Index o = 0; o < W.rows(); ++o) {
      double acc = p.biases[l](0, o);
      for (Eigen::Index i = 0; i < W.cols(); ++i) acc += W(o, i) * h[i];
      z[o] = (l + 1 == p.weights.size()) ? acc : (acc > 0 ? acc : 0.0);
    }
    h = z;
  }
  return Eigen::Map<Vector>(h.data(), h.size());
}

double mlp_loss(const MlpParams& p, const Matrix& x, const Matrix& target) {
  Rng rng(0);
  Matrix out = mlp_forward_batch(p, x, rng);
  return (out - target).squaredNorm() / out.rows();
}

}  // namespace

TEST_CASE("mlp_forward: zero network gives zero output") {
  MlpParams p = zero_mlp({3, 5, 2}, Activation::silu);
  Rng rng(1);
  Vector x(3);
  x << 0.3, -1.0, 4.0;
  CHECK(mlp_forward(p, x, rng).isZero(0.0));
}

TEST_CASE("mlp_forward: identity layer") {
  MlpParams p = zero_mlp({2, 2}, Activation::relu);
  p.weights[0] = Matrix::Identity(2, 2);
  Rng rng(1);
  Vector x(2);
  x << 1.0, 2.0;
  Vector y = mlp_forward(p, x, rng);
  CHECK(y(0) == 1.0);
  CHECK(y(1) == 2.0);
}

TEST_CASE("mlp_forward: two-layer relu matches hand-rolled evaluation") {
  Rng init(42);
  MlpParams p = make_mlp({4, 7, 3}, Activation::relu, 0.0, init);
  for (auto& b : p.biases) b = standard_normal(1, b.cols(), init);
  Rng rng(0);
  for (int trial = 0; trial < 10; ++trial) {
    Vector x = standard_normal(4, 1, init);
    Vector got = mlp_forward(p, x, rng);
    Vector want = hand_forward_relu(p, x);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("mlp_forward: dimension mismatch is a shape error") {
  MlpParams p = zero_mlp({3, 2}, Activation::relu);
  Rng rng(0);
  CHECK_THROWS_AS(mlp_forward(p, Vector::Zero(4), rng), ShapeError);
}

TEST_CASE("mlp_forward: eval mode is bit-reproducible, train mode uses dropout") {
  Rng init(5);
  MlpParams p = make_mlp({3, 32, 32, 2}, Activation::silu, 0.3, init);
  Matrix x = standard_normal(16, 3, init);
  Rng a(1), b(2);
  Matrix ya = mlp_forward_batch(p, x, a);
  Matrix yb = mlp_forward_batch(p, x, b);
  CHECK(ya == yb);
  p.train_mode = true;
  Rng c(1), d(2);
  CHECK(mlp_forward_batch(p, x, c) != mlp_forward_batch(p, x, d));
  p.dropout_rate = 0.0;
  Rng e(1);
  CHECK(mlp_forward_batch(p, x, e) == ya);
}

TEST_CASE("grad: quadratic") {
  Tape t;
  Matrix x0(1, 2);
  x0 << 3.0, 4.0;
  Var x = t.leaf(x0);
  Var q = mean_sq_norm(x);  // one row: ||x||^2
  t.backward(q);
  CHECK(x.grad()(0, 0) == doctest::Approx(6.0));
  CHECK(x.grad()(0, 1) == doctest::Approx(8.0));
}

TEST_CASE("grad: softmax . c matches finite differences") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix logits = standard_normal(1, 5, rng);
    Matrix c = standard_normal(1, 5, rng);
    Tape t;
    Var z = t.leaf(logits);
    t.backward(dot_const(softmax_rows(z), c));
    Matrix analytic = z.grad();
    Matrix probe = logits;
    Matrix fd = central_diff(probe, [&] {
      Vector s = softmax(Vector(probe.row(0).transpose()));
      return s.dot(Vector(c.row(0).transpose()));
    });
    CHECK(rel_error(analytic, fd) < 1e-4);
  }
}

TEST_CASE("grad: parameter the loss ignores gets zero gradient") {
  Tape t;
  Var a = t.leaf(Matrix::Constant(2, 2, 1.5));
  Var unused = t.leaf(Matrix::Constant(2, 2, -3.0));
  t.backward(mean_sq_norm(a));
  CHECK(unused.grad().isZero(0.0));
}

TEST_CASE("grad: operands from two tapes are rejected") {
  Tape t1, t2;
  Var a = t1.leaf(Matrix::Ones(1, 2));
  Var b = t2.leaf(Matrix::Ones(1, 2));
  CHECK_THROWS_AS(add(a, b), ValidationError);
}

TEST_CASE("grad: mlp losses match finite differences on 20 random points") {
  for (Activation act : {Activation::relu, Activation::tanh, Activation::silu}) {
    CAPTURE(to_string(act));
    for (int trial = 0; trial < 20; ++trial) {
      Rng rng(100 + trial);
      MlpParams p = make_mlp({3, 6, 4, 2}, act, 0.0, rng);
      for (auto& b : p.biases) b = standard_normal(1, b.cols(), rng) * 0.3;
      Matrix x = standard_normal(5, 3, rng);
      Matrix target = standard_normal(5, 2, rng);
      Tape t;
      MlpVars vars = bind(t, p);
      Rng fwd(0);
      Var out = mlp_forward(p, vars, t.constant(x), fwd);
      t.backward(mean_sq_norm(sub(out, t.constant(target))));
      MlpGrads g = read_grads(vars);
      for (std::size_t l = 0; l < p.num_layers(); ++l) {
        Matrix fdw = central_diff(p.weights[l], [&] { return mlp_loss(p, x, target); });
        Matrix fdb = central_diff(p.biases[l], [&] { return mlp_loss(p, x, target); });
        // relu kinks make FD unreliable only exactly at 0; random inputs avoid that
        CHECK(rel_error(g.weights[l], fdw) < 1e-4);
        CHECK(rel_error(g.biases[l], fdb) < 1e-4);
      }
    }
  }
}

TEST_CASE("grad: gumbel-softmax, reshape, concat and mix_rows primitives") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix logits = standard_normal(4, 3, rng);
    Matrix noise = standard_normal(4, 3, rng);
    Matrix table = standard_normal(1, 6, rng);
    Matrix eps = standard_normal(4, 6, rng);
    Matrix c = standard_normal(4, 4, rng);
    auto eval = [&](const Matrix& lg, const Matrix& tb, Matrix* dl, Matrix* dt) {
      Tape t;
      Var l = t.leaf(lg);
      Var tv = t.leaf(tb);
      Var w = gumbel_softmax_rows(l, noise, 0.7);
      Var theta = reshape(tv, 3, 2);
      Var x = add(matmul(w, theta), scale(mix_rows(w, eps, 2), 0.3));
      Var y = concat_cols(x, tanh(x));
      Var loss = add(dot_const(y, c), mean_sq_norm(y));
      if (dl) {
        t.backward(loss);
        *dl = l.grad();
        *dt = tv.grad();
      }
      return loss.value()(0, 0);
    };
    Matrix dl, dt;
    eval(logits, table, &dl, &dt);
    Matrix lp = logits, tp = table;
    Matrix fdl = central_diff(lp, [&] { return eval(lp, table, nullptr, nullptr); });
    Matrix fdt = central_diff(tp, [&] { return eval(logits, tp, nullptr, nullptr); });
    CHECK(rel_error(dl, fdl) < 1e-4);
    CHECK(rel_error(dt, fdt) < 1e-4);
  }
}

TEST_CASE("gumbel_softmax: zero logits give softmax of the noise") {
  Vector logits = Vector::Zero(3);
  Vector g(3);
  g << 0.2, -1.0, 0.7;
  Vector y = gumbel_softmax(logits, 1.0, g);
  Vector want = softmax(g);
  CHECK((y - want).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(std::abs(y.sum() - 1.0) < 1e-12);
}

TEST_CASE("gumbel_softmax: low temperature concentrates on the argmax") {
  Vector logits(3);
  logits << 10.0, 0.0, 0.0;
  Rng rng(9);
  for (int i = 0; i < 200; ++i) {
    Vector g = gumbel_noise(1, 3, rng).row(0).transpose().cwiseMax(-3.0).cwiseMin(3.0);
    Vector y = gumbel_softmax(logits, 0.01, g);
    CHECK(std::abs(y(0) - 1.0) < 1e-6);
    CHECK(y(1) < 1e-6);
    CHECK(y(2) < 1e-6);
  }
}

TEST_CASE("gumbel_softmax: output always on the open simplex") {
  Rng rng(17);
  for (int i = 0; i < 2000; ++i) {
    Vector logits = standard_normal(5, 1, rng) * 20.0;
    double temp = (i % 3 == 0) ? 0.001 : 0.5;
    Vector y = gumbel_softmax(logits, temp, rng);
    CHECK((y.array() > 0.0).all());
    CHECK(std::abs(y.sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("gumbel_softmax: hard readout frequencies match softmax(logits)") {
  Vector logits(4);
  logits << 0.5, -0.3, 1.2, 0.0;
  Vector target = softmax(logits);
  Rng rng(2024);
  Vector counts = Vector::Zero(4);
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    Vector y = gumbel_softmax(logits, 0.1, rng);
    Eigen::Index arg;
    y.maxCoeff(&arg);
    counts(arg) += 1.0;
  }
  double tv = 0.5 * (counts / n - target).cwiseAbs().sum();
  CHECK(tv < 0.01);
}

TEST_CASE("gumbel_softmax: invalid inputs are rejected") {
  Vector logits = Vector::Zero(3);
  Rng rng(0);
  CHECK_THROWS_AS(gumbel_softmax(logits, 0.0, rng), ValidationError);
  logits(1) = std::nan("");
  CHECK_THROWS_AS(gumbel_softmax(logits, 1.0, rng), ValidationError);
}

TEST_CASE("opt_step: sgd arithmetic and zero learning rate") {
  Matrix w = Matrix::Constant(1, 1, 1.0);
  Matrix g = Matrix::Constant(1, 1, 2.0);
  OptState s;
  s.config.kind = OptimizerKind::sgd;
  s.config.lr = 0.0;
  opt_step({{"w", &w, &g}}, s);
  CHECK(w(0, 0) == 1.0);
  s.config.lr = 0.1;
  opt_step({{"w", &w, &g}}, s);
  CHECK(w(0, 0) == doctest::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("opt_step: adam converges on (w - 3)^2 and follows the reference recurrence") {
  Matrix w = Matrix::Zero(1, 1);
  OptState s;
  s.config.kind = OptimizerKind::adam;
  s.config.lr = 0.1;
  // independent recurrence
  double rw = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    Matrix g = Matrix::Constant(1, 1, 2.0 * (w(0, 0) - 3.0));
    opt_step({{"w", &w, &g}}, s);
    double rg = 2.0 * (rw - 3.0);
    m = 0.9 * m + 0.1 * rg;
    v = 0.999 * v + 0.001 * rg * rg;
    double mh = m / (1.0 - std::pow(0.9, t));
    double vh = v / (1.0 - std::pow(0.999, t));
    rw -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
  }
  CHECK(std::abs(w(0, 0) - rw) < 1e-12);
  CHECK(std::abs(w(0, 0) - 3.0) < 0.1);
}

TEST_CASE("opt_step: non-finite gradient is rejected before any write") {
  Matrix a = Matrix::Ones(2, 2), b = Matrix::Ones(2, 2);
  Matrix ga = Matrix::Ones(2, 2), gb = Matrix::Ones(2, 2);
  gb(1, 0) = std::numeric_limits<double>::infinity();
  OptState s;
  s.config.kind = OptimizerKind::sgd;
  s.config.lr = 0.5;
  try {
    opt_step({{"head.w0", &a, &ga}, {"head.b0", &b, &gb}}, s);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("head.b0") != std::string::npos);
  }
  CHECK(a == Matrix::Ones(2, 2));
  CHECK(s.step == 0);
}

TEST_CASE("mlp json round-trip is exact") {
  Rng rng(8);
  MlpParams p = make_mlp({3, 4, 2}, Activation::tanh, 0.1, rng);
  MlpParams q = mlp_from_json(nlohmann::json::parse(to_json(p).dump()));
  CHECK(q.layer_sizes == p.layer_sizes);
  CHECK(q.activation == p.activation);
  CHECK(q.dropout_rate == p.dropout_rate);
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    CHECK(q.weights[l] == p.weights[l]);
    CHECK(q.biases[l] == p.biases[l]);
  }
  nlohmann::json bad = to_json(p);
  bad["weights"][0].erase(0);
  CHECK_THROWS_AS(mlp_from_json(bad), ShapeError);
}
