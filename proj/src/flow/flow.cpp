#include "mixflow/flow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/nn/tape.hpp"

namespace mixflow::flow {

void VelocityField::validate() const {
  net.validate();
  if (dim < 1 || descriptor_size < 0) throw ValidationError("velocity: invalid dimensions");
  if (net.input_size() != dim + 1 + descriptor_size)
    throw ShapeError("velocity: network input must be dim + 1 + descriptor size");
  if (net.output_size() != dim) throw ShapeError("velocity: network output must equal dim");
}

VelocityField make_velocity_field(int dim, int descriptor_size, const std::vector<int>& hidden,
                                  nn::Activation activation, double dropout_rate, Rng& rng) {
  std::vector<int> sizes{dim + 1 + descriptor_size};
  sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(dim);
  VelocityField v{nn::make_mlp(sizes, activation, dropout_rate, rng), dim, descriptor_size};
  v.validate();
  return v;
}

Matrix velocity_features(const Matrix& x, const Vector& t, const Vector& y) {
  if (t.size() != 1 && t.size() != x.rows())
    throw ShapeError("velocity: need one time or one time per row");
  Matrix f(x.rows(), x.cols() + 1 + y.size());
  f.leftCols(x.cols()) = x;
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    f(s, x.cols()) = t.size() == 1 ? t(0) : t(s);
    f.row(s).tail(y.size()) = y.transpose();
  }
  return f;
}

namespace {

void check_inputs(const VelocityField& v, const Matrix& x, const Vector& y) {
  if (x.cols() != v.dim) {
    std::ostringstream os;
    os << "velocity: points have dimension " << x.cols() << ", field expects " << v.dim;
    throw ShapeError(os.str());
  }
  if (y.size() != v.descriptor_size) {
    std::ostringstream os;
    os << "velocity: descriptor has length " << y.size() << ", field expects "
       << v.descriptor_size;
    throw ShapeError(os.str());
  }
}

nn::MlpParams eval_copy(const nn::MlpParams& p) {
  nn::MlpParams out = p;
  out.train_mode = false;
  return out;
}

Matrix eval_velocity(const nn::MlpParams& net, const Matrix& x, double t, const Vector& y) {
  Rng unused(0);
  return nn::mlp_forward_batch(net, velocity_features(x, Vector::Constant(1, t), y), unused);
}

void check_times(const Vector& t) {
  for (Eigen::Index s = 0; s < t.size(); ++s)
    if (!(t(s) >= 0.0 && t(s) <= 1.0)) throw ValidationError("time must lie in [0, 1]");
}

}  // namespace

Matrix velocity(const VelocityField& v, const Matrix& x, double t, const Vector& y) {
  check_inputs(v, x, y);
  return eval_velocity(eval_copy(v.net), x, t, y);
}

std::string to_string(Method m) { return m == Method::euler ? "euler" : "rk4"; }

Method method_from_string(const std::string& name) {
  if (name == "euler") return Method::euler;
  if (name == "rk4") return Method::rk4;
  throw ValidationError("unknown integrator '" + name + "' (expected euler|rk4)");
}

void IntegratorConfig::validate() const {
  if (steps < 1) throw ValidationError("integrator: steps must be >= 1");
}

Matrix interpolate(const Matrix& x0, const Matrix& x1, double t) {
  if (x0.rows() != x1.rows() || x0.cols() != x1.cols())
    throw ShapeError("interpolate: endpoints differ in shape (" + shape_string(x0) + " vs " +
                     shape_string(x1) + ")");
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("interpolate: t must lie in [0, 1]");
  return (1.0 - t) * x0 + t * x1;
}

VelocityLoss loss_ot(const VelocityField& v, const Matrix& base, const Matrix& target,
                     const ot::Pairing& tau, const Vector& t, const Vector& y, Rng& rng) {
  if (base.rows() != target.rows() || base.cols() != target.cols())
    throw ShapeError("loss_ot: base and target batches differ (" + shape_string(base) + " vs " +
                     shape_string(target) + ")");
  if (tau.size() != static_cast<std::size_t>(base.rows()) || !tau.is_bijection())
    throw ValidationError("loss_ot: pairing is not a permutation of the batch");
  if (base.rows() < 1) throw ValidationError("loss_ot: empty batch");
  check_inputs(v, base, y);
  check_times(t);
  const Eigen::Index S = base.rows();
  Matrix paired(S, base.cols());
  for (Eigen::Index s = 0; s < S; ++s) paired.row(s) = target.row(static_cast<Eigen::Index>(tau.tau[s]));
  Matrix xt(S, base.cols());
  for (Eigen::Index s = 0; s < S; ++s) {
    const double ts = t.size() == 1 ? t(0) : t(s);
    xt.row(s) = (1.0 - ts) * base.row(s) + ts * paired.row(s);
  }
  nn::Tape tape;
  nn::MlpVars vars = nn::bind(tape, v.net);
  nn::Var pred = nn::mlp_forward(v.net, vars, tape.constant(velocity_features(xt, t, y)), rng);
  nn::Var loss = nn::mean_sq_norm(nn::sub(pred, tape.constant(paired - base)));
  tape.backward(loss);
  return {loss.value()(0, 0), nn::read_grads(vars)};
}

VelocityLoss loss_cfm_baseline(const VelocityField& v, const Matrix& target, const Vector& t,
                               const Vector& y, bool ot_pairing, Rng& rng) {
  Matrix x0 = standard_normal(target.rows(), target.cols(), rng);
  ot::Pairing tau;
  if (ot_pairing) {
    tau = ot::assignment_pairing(x0, target);
  } else {
    tau.tau.resize(static_cast<std::size_t>(target.rows()));
    for (std::size_t s = 0; s < tau.tau.size(); ++s) tau.tau[s] = s;
  }
  return loss_ot(v, x0, target, tau, t, y, rng);
}

GeoLoss loss_geo(const mixture::BasePredictor& bp, const Matrix& target, const Vector& y,
                 double temperature, const mixture::MixtureNoise& noise, bool train_mode,
                 Rng& dropout_rng) {
  if (target.cols() != bp.dim)
    throw ShapeError("loss_geo: targets have dimension " + std::to_string(target.cols()) +
                     ", base has " + std::to_string(bp.dim));
  if (noise.gumbel.rows() != target.rows())
    throw ShapeError("loss_geo: noise rows must equal the batch size");
  nn::Tape tape;
  mixture::BaseVars vars = mixture::bind(tape, bp);
  mixture::TapedGmm g = mixture::predict_base(bp, vars, y, train_mode, dropout_rng);
  nn::Var x0 = mixture::sample_relaxed(g, noise, temperature);
  GeoLoss out;
  out.base_samples = x0.value();
  out.tau = ot::assignment_pairing(out.base_samples, target);
  Matrix paired(target.rows(), target.cols());
  for (Eigen::Index s = 0; s < target.rows(); ++s)
    paired.row(s) = target.row(static_cast<Eigen::Index>(out.tau.tau[s]));
  nn::Var loss = nn::mean_sq_norm(nn::sub(tape.constant(paired), x0));
  tape.backward(loss);
  out.value = loss.value()(0, 0);
  out.grads = mixture::read_grads(bp, vars);
  return out;
}

GeoLoss loss_geo(const mixture::BasePredictor& bp, const Matrix& target, const Vector& y,
                 double temperature, bool train_mode, Rng& rng) {
  mixture::MixtureNoise noise =
      mixture::draw_mixture_noise(target.rows(), bp.num_modes, bp.dim, rng);
  return loss_geo(bp, target, y, temperature, noise, train_mode, rng);
}

namespace {

// Steps first..last-1 of the uniform grid t_k = k / steps.
Matrix integrate_segment(const nn::MlpParams& net, Matrix x, const Vector& y, Method method,
                         int steps, int first, int last) {
  const double h = 1.0 / steps;
  for (int k = first; k < last; ++k) {
    const double t = static_cast<double>(k) / steps;
    if (method == Method::euler) {
      x += h * eval_velocity(net, x, t, y);
    } else {
      Matrix k1 = eval_velocity(net, x, t, y);
      Matrix k2 = eval_velocity(net, x + 0.5 * h * k1, t + 0.5 * h, y);
      Matrix k3 = eval_velocity(net, x + 0.5 * h * k2, t + 0.5 * h, y);
      Matrix k4 = eval_velocity(net, x + h * k3, t + h, y);
      x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    if (!x.allFinite())
      throw NumericalError("integrate: non-finite state at step " + std::to_string(k + 1));
  }
  return x;
}

}  // namespace

Matrix integrate(const VelocityField& v, const Matrix& x0, const Vector& y,
                 const IntegratorConfig& cfg) {
  return integrate_snapshots(v, x0, y, cfg, {1.0}).front();
}

std::vector<Matrix> integrate_snapshots(const VelocityField& v, const Matrix& x0, const Vector& y,
                                        const IntegratorConfig& cfg,
                                        const std::vector<double>& times) {
  cfg.validate();
  check_inputs(v, x0, y);
  for (double t : times)
    if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("integrate: snapshot times must lie in [0, 1]");
  const nn::MlpParams net = eval_copy(v.net);
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  std::vector<Matrix> at_sorted;
  Matrix x = x0;
  int done = 0;
  for (double t : sorted) {
    const int target_step = static_cast<int>(std::lround(t * cfg.steps));
    if (target_step > done) {
      x = integrate_segment(net, x, y, cfg.method, cfg.steps, done, target_step);
      done = target_step;
    }
    at_sorted.push_back(x);
  }
  std::vector<Matrix> out;
  for (double t : times)
    out.push_back(at_sorted[std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin()]);
  return out;
}

nlohmann::json to_json(const VelocityField& v) {
  nlohmann::json j = nn::to_json(v.net);
  j["dim"] = v.dim;
  j["descriptor_size"] = v.descriptor_size;
  return j;
}

VelocityField velocity_from_json(const nlohmann::json& j) {
  try {
    VelocityField v{nn::mlp_from_json(j), j.at("dim").get<int>(),
                    j.at("descriptor_size").get<int>()};
    v.validate();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("velocity json: ") + e.what());
  }
}

}  // namespace mixflow::flow
