#include <doctest.h>

#include <cmath>

#include "fd_oracle.hpp"
#include "mixflow/common/error.hpp"
#include "mixflow/mixture/gmm.hpp"
#include "mixflow/nn/gumbel.hpp"
#include "mixflow/ot/wasserstein.hpp"

using namespace mixflow;
using namespace mixflow::mixture;

namespace {

BaseConfig small_config(ModeSource src = ModeSource::predicted) {
  BaseConfig cfg;
  cfg.num_modes = 3;
  cfg.dim = 2;
  cfg.descriptor_size = 4;
  cfg.hidden = {8};
  cfg.activation = nn::Activation::tanh;
  cfg.mode_source = src;
  cfg.init_gain = 1.0;
  return cfg;
}

// Straight-line evaluation of a one-hidden-layer tanh network.
Vector one_hidden_tanh(const nn::MlpParams& p, const Vector& y) {
  Vector h(p.layer_sizes[1]);
  for (int o = 0; o < p.layer_sizes[1]; ++o) {
    double acc = p.biases[0](0, o);
    for (int k = 0; k < p.layer_sizes[0]; ++k) acc += p.weights[0](o, k) * y(k);
    h(o) = std::tanh(acc);
  }
  Vector out(p.layer_sizes[2]);
  for (int o = 0; o < p.layer_sizes[2]; ++o) {
    double acc = p.biases[1](0, o);
    for (int k = 0; k < p.layer_sizes[1]; ++k) acc += p.weights[1](o, k) * h(k);
    out(o) = acc;
  }
  return out;
}

}  // namespace

TEST_CASE("predict_base: zero heads give zero modes and uniform weights") {
  BasePredictor bp;
  bp.num_modes = 4;
  bp.dim = 3;
  bp.mode_head = nn::zero_mlp({2, 5, 12}, nn::Activation::relu);
  bp.weight_head = nn::zero_mlp({2, 5, 4}, nn::Activation::relu);
  Rng rng(1);
  Vector y(2);
  y << 0.3, -1.0;
  GmmParams g = predict_base(bp, y, false, rng);
  CHECK(g.theta.isZero(0.0));
  for (int i = 0; i < 4; ++i) CHECK(g.p(i) == doctest::Approx(0.25));
}

TEST_CASE("predict_base: free parameter table ignores the descriptor") {
  Rng rng(2);
  BasePredictor bp = make_base_predictor(small_config(ModeSource::free_parameters), rng);
  bp.free_theta = standard_normal(3, 2, rng);
  for (int trial = 0; trial < 3; ++trial) {
    Vector y = standard_normal(4, 1, rng);
    CHECK(predict_base(bp, y, false, rng).theta == bp.free_theta);
  }
}

TEST_CASE("predict_base: matches an independent forward evaluation") {
  Rng rng(3);
  BasePredictor bp = make_base_predictor(small_config(), rng);
  Vector y = standard_normal(4, 1, rng);
  GmmParams g = predict_base(bp, y, false, rng);
  Vector flat = one_hidden_tanh(bp.mode_head, y);
  for (int i = 0; i < 3; ++i)
    for (int d = 0; d < 2; ++d) CHECK(g.theta(i, d) == doctest::Approx(flat(i * 2 + d)).epsilon(1e-13));
  Vector logits = one_hidden_tanh(bp.weight_head, y);
  Vector e = (logits.array() - logits.maxCoeff()).exp();
  e /= e.sum();
  for (int i = 0; i < 3; ++i) CHECK(g.p(i) == doctest::Approx(e(i)).epsilon(1e-13));
}

TEST_CASE("predict_base: eval mode deterministic; dropout 0 makes train equal eval") {
  Rng rng(4);
  BaseConfig cfg = small_config();
  BasePredictor bp = make_base_predictor(cfg, rng);
  Vector y = standard_normal(4, 1, rng);
  Rng a(10), b(99);
  GmmParams ea = predict_base(bp, y, false, a), eb = predict_base(bp, y, false, b);
  CHECK(ea.theta == eb.theta);
  CHECK(ea.p == eb.p);
  GmmParams ta = predict_base(bp, y, true, a);
  CHECK(ta.theta == ea.theta);
  CHECK(ta.p == ea.p);

  cfg.dropout_rate = 0.5;
  BasePredictor dp = make_base_predictor(cfg, rng);
  GmmParams d1 = predict_base(dp, y, true, a), d2 = predict_base(dp, y, true, a);
  CHECK_FALSE(d1.theta == d2.theta);
}

TEST_CASE("predict_base: weights stay on the simplex for any descriptor") {
  Rng rng(5);
  BaseConfig cfg = small_config();
  cfg.init_gain = 30.0;  // saturating logits
  BasePredictor bp = make_base_predictor(cfg, rng);
  for (int trial = 0; trial < 50; ++trial) {
    Vector y = 10.0 * standard_normal(4, 1, rng);
    GmmParams g = predict_base(bp, y, false, rng);
    CHECK(g.p.minCoeff() >= 0.0);
    CHECK(std::abs(g.p.sum() - 1.0) <= 1e-12);
    CHECK_NOTHROW(g.validate());
  }
}

TEST_CASE("predict_base: descriptor length mismatch is a shape error") {
  Rng rng(6);
  BasePredictor bp = make_base_predictor(small_config(), rng);
  CHECK_THROWS_AS(predict_base(bp, Vector::Zero(3), false, rng), ShapeError);
}

TEST_CASE("sample_hard: point-mass limit and degenerate weights") {
  Rng rng(7);
  GmmParams one{Matrix::Constant(1, 2, 0.7), Vector::Ones(1), 1e-20};
  Matrix x = sample_hard(one, 100, rng);
  for (Eigen::Index s = 0; s < x.rows(); ++s) CHECK((x.row(s) - one.theta.row(0)).norm() <= 1e-8);

  GmmParams two{Matrix(2, 1), Vector(2), 1e-4};
  two.theta << -5, 5;
  two.p << 1.0, 0.0;
  x = sample_hard(two, 2000, rng);
  CHECK(x.maxCoeff() < 0.0);
}

TEST_CASE("sample_hard: component frequencies match p") {
  Rng rng(8);
  GmmParams g{Matrix(3, 1), Vector(3), 1e-4};
  g.theta << -10, 0, 10;
  g.p << 0.2, 0.3, 0.5;
  const int n = 100000;
  Matrix x = sample_hard(g, n, rng);
  Vector freq = Vector::Zero(3);
  for (int s = 0; s < n; ++s) freq(x(s, 0) < -5 ? 0 : (x(s, 0) < 5 ? 1 : 2)) += 1.0 / n;
  CHECK(0.5 * (freq - g.p).cwiseAbs().sum() <= 0.01);
}

TEST_CASE("sample_relaxed: low temperature tracks hard samples under shared noise") {
  Rng rng(9);
  GmmParams g{standard_normal(3, 2, rng), Vector(3), 1e-2};
  g.p << 1.0, 0.0, 0.0;
  MixtureNoise noise = draw_mixture_noise(500, 3, 2, rng);
  Matrix hard = sample_hard(g, noise), soft = sample_relaxed(g, noise, 1e-3);
  CHECK((hard - soft).cwiseAbs().maxCoeff() <= 1e-4);

  GmmParams single{standard_normal(1, 2, rng), Vector::Ones(1), 0.3};
  MixtureNoise n1 = draw_mixture_noise(50, 1, 2, rng);
  for (double temp : {0.05, 1.0, 20.0}) CHECK(sample_relaxed(single, n1, temp) == sample_hard(single, n1));
}

TEST_CASE("sample_relaxed: converges to hard sampling in W2") {
  Rng rng(10);
  GmmParams g{Matrix(2, 2), Vector(2), 1e-2};
  g.theta << -1, 0, 1, 0.5;
  g.p << 0.35, 0.65;
  const int n = 400;
  Matrix hard_a = sample_hard(g, n, rng), hard_b = sample_hard(g, n, rng);
  Matrix relaxed = sample_relaxed(g, n, 0.01, rng);
  const double ref = ot::empirical_wasserstein(hard_a, hard_b, 2);
  CHECK(ot::empirical_wasserstein(relaxed, hard_a, 2) <= 3.0 * ref);
}

TEST_CASE("sample_relaxed: taped path equals plain path and gradients match FD") {
  Rng rng(11);
  BasePredictor bp = make_base_predictor(small_config(ModeSource::free_parameters), rng);
  bp.free_theta = standard_normal(3, 2, rng);
  Vector y = standard_normal(4, 1, rng);
  MixtureNoise noise = draw_mixture_noise(16, 3, 2, rng);
  const double temp = 0.7;

  nn::Tape tape;
  BaseVars vars = bind(tape, bp);
  Rng r1(0);
  TapedGmm tg = predict_base(bp, vars, y, false, r1);
  nn::Var x = sample_relaxed(tg, noise, temp);
  Rng r2(0);
  GmmParams plain = predict_base(bp, y, false, r2);
  CHECK((x.value() - sample_relaxed(plain, noise, temp)).cwiseAbs().maxCoeff() <= 1e-12);

  nn::Var loss = nn::mean_sq_norm(x);
  tape.backward(loss);
  BaseGrads grads = read_grads(bp, vars);

  auto eval = [&]() {
    Rng r(0);
    return sample_relaxed(predict_base(bp, y, false, r), noise, temp).rowwise().squaredNorm().mean();
  };
  Matrix fd_theta = testing::central_diff(bp.free_theta, eval);
  CHECK(testing::rel_error(grads.free_theta, fd_theta) <= 1e-6);
  Matrix fd_w = testing::central_diff(bp.weight_head.weights[0], eval);
  CHECK(testing::rel_error(grads.weight_head.weights[0], fd_w) <= 1e-5);
}

TEST_CASE("sample_relaxed: predicted-mode gradients match FD") {
  Rng rng(12);
  BasePredictor bp = make_base_predictor(small_config(), rng);
  Vector y = standard_normal(4, 1, rng);
  MixtureNoise noise = draw_mixture_noise(10, 3, 2, rng);
  nn::Tape tape;
  BaseVars vars = bind(tape, bp);
  Rng r1(0);
  nn::Var loss = nn::mean_sq_norm(sample_relaxed(predict_base(bp, vars, y, false, r1), noise, 0.5));
  tape.backward(loss);
  BaseGrads grads = read_grads(bp, vars);
  auto eval = [&]() {
    Rng r(0);
    return sample_relaxed(predict_base(bp, y, false, r), noise, 0.5).rowwise().squaredNorm().mean();
  };
  for (std::size_t l = 0; l < 2; ++l) {
    Matrix fd = testing::central_diff(bp.mode_head.weights[l], eval);
    CHECK(testing::rel_error(grads.mode_head.weights[l], fd) <= 1e-5);
  }
}

TEST_CASE("gmm and predictor json round-trips") {
  Rng rng(13);
  GmmParams g{standard_normal(2, 3, rng), Vector(2), 0.25};
  g.p << 0.4, 0.6;
  GmmParams g2 = gmm_from_json(nlohmann::json::parse(to_json(g).dump()));
  CHECK(g2.theta == g.theta);
  CHECK(g2.p == g.p);
  CHECK(g2.sigma2 == g.sigma2);

  for (ModeSource src : {ModeSource::predicted, ModeSource::free_parameters}) {
    BasePredictor bp = make_base_predictor(small_config(src), rng);
    if (src == ModeSource::free_parameters) bp.free_theta = standard_normal(3, 2, rng);
    BasePredictor back = base_predictor_from_json(nlohmann::json::parse(to_json(bp).dump()));
    Vector y = standard_normal(4, 1, rng);
    GmmParams a = predict_base(bp, y, false, rng), b = predict_base(back, y, false, rng);
    CHECK(a.theta == b.theta);
    CHECK(a.p == b.p);
  }
  nlohmann::json bad = to_json(g);
  bad["p"] = {0.5, 0.6};
  CHECK_THROWS_AS(gmm_from_json(bad), ValidationError);
}
