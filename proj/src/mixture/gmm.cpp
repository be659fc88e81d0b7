#include "mixflow/mixture/gmm.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/common/json_io.hpp"
#include "mixflow/nn/gumbel.hpp"
#include "mixflow/ot/transport.hpp"

namespace mixflow::mixture {

using nn::Var;

void GmmParams::validate() const {
  if (theta.rows() < 1 || theta.cols() < 1) throw ShapeError("gmm: theta must be at least 1x1");
  if (p.size() != theta.rows())
    throw ShapeError("gmm: " + std::to_string(p.size()) + " weights for " +
                     std::to_string(theta.rows()) + " modes");
  if (!theta.allFinite()) throw ValidationError("gmm: non-finite mode location");
  ot::require_simplex(p, "gmm weights");
  if (!(sigma2 > 0.0) || !std::isfinite(sigma2))
    throw ValidationError("gmm: sigma2 must be positive and finite");
}

GmmParams standard_normal_base(Eigen::Index dim) {
  return GmmParams{Matrix::Zero(1, dim), Vector::Ones(1), 1.0};
}

std::string to_string(ModeSource s) {
  return s == ModeSource::predicted ? "predicted" : "free_parameters";
}

ModeSource mode_source_from_string(const std::string& name) {
  if (name == "predicted") return ModeSource::predicted;
  if (name == "free_parameters" || name == "free") return ModeSource::free_parameters;
  throw ValidationError("unknown mode source '" + name + "' (expected predicted|free_parameters)");
}

void BasePredictor::validate() const {
  if (num_modes < 1 || dim < 1) throw ValidationError("base: num_modes and dim must be >= 1");
  if (!(sigma2 > 0.0)) throw ValidationError("base: sigma2 must be positive");
  weight_head.validate();
  if (weight_head.output_size() != num_modes)
    throw ShapeError("base: weight head must output num_modes logits");
  if (mode_source == ModeSource::predicted) {
    mode_head.validate();
    if (mode_head.output_size() != num_modes * dim)
      throw ShapeError("base: mode head must output num_modes*dim values");
    if (mode_head.input_size() != weight_head.input_size())
      throw ShapeError("base: heads disagree on descriptor size");
  } else {
    require_shape(free_theta, num_modes, dim, "base: free mode table");
  }
}

BasePredictor make_base_predictor(const BaseConfig& cfg, Rng& rng) {
  if (cfg.num_modes < 1 || cfg.dim < 1 || cfg.descriptor_size < 1)
    throw ValidationError("base: num_modes, dim and descriptor_size must be >= 1");
  BasePredictor bp;
  bp.num_modes = cfg.num_modes;
  bp.dim = cfg.dim;
  bp.sigma2 = cfg.sigma2;
  bp.mode_source = cfg.mode_source;
  auto sizes = [&](int out) {
    std::vector<int> s{cfg.descriptor_size};
    s.insert(s.end(), cfg.hidden.begin(), cfg.hidden.end());
    s.push_back(out);
    return s;
  };
  if (cfg.mode_source == ModeSource::predicted) {
    bp.mode_head = nn::make_mlp(sizes(cfg.num_modes * cfg.dim), cfg.activation, cfg.dropout_rate,
                                rng, cfg.init_gain);
  } else {
    bp.free_theta = Matrix::Zero(cfg.num_modes, cfg.dim);
  }
  bp.weight_head = nn::make_mlp(sizes(cfg.num_modes), cfg.activation, cfg.dropout_rate, rng,
                                cfg.init_gain);
  bp.validate();
  return bp;
}

namespace {

void check_descriptor(const BasePredictor& bp, const Vector& y) {
  if (y.size() != bp.descriptor_size()) {
    std::ostringstream os;
    os << "predict_base: descriptor has length " << y.size() << ", predictor expects "
       << bp.descriptor_size();
    throw ShapeError(os.str());
  }
}

nn::MlpParams with_mode(const nn::MlpParams& p, bool train_mode) {
  nn::MlpParams out = p;
  out.train_mode = train_mode;
  return out;
}

Vector safe_log(const Vector& p) {
  return p.cwiseMax(std::numeric_limits<double>::min()).array().log().matrix();
}

}  // namespace

GmmParams predict_base(const BasePredictor& bp, const Vector& y, bool train_mode, Rng& rng) {
  check_descriptor(bp, y);
  GmmParams g;
  g.sigma2 = bp.sigma2;
  if (bp.mode_source == ModeSource::predicted) {
    Vector flat = nn::mlp_forward(with_mode(bp.mode_head, train_mode), y, rng);
    g.theta.resize(bp.num_modes, bp.dim);
    for (int i = 0; i < bp.num_modes; ++i)
      for (int d = 0; d < bp.dim; ++d) g.theta(i, d) = flat(i * bp.dim + d);
  } else {
    g.theta = bp.free_theta;
  }
  g.p = nn::softmax(nn::mlp_forward(with_mode(bp.weight_head, train_mode), y, rng));
  g.p /= g.p.sum();
  return g;
}

MixtureNoise draw_mixture_noise(Eigen::Index n, Eigen::Index num_modes, Eigen::Index dim,
                                Rng& rng) {
  MixtureNoise noise;
  noise.gumbel = nn::gumbel_noise(n, num_modes, rng);
  noise.eps = standard_normal(n, num_modes * dim, rng);
  return noise;
}

namespace {

void check_noise(const GmmParams& g, const MixtureNoise& noise) {
  if (noise.gumbel.cols() != g.num_modes() || noise.eps.cols() != g.num_modes() * g.dim() ||
      noise.eps.rows() != noise.gumbel.rows())
    throw ShapeError("mixture noise does not match the mixture shape");
}

}  // namespace

Matrix sample_hard(const GmmParams& g, const MixtureNoise& noise) {
  g.validate();
  check_noise(g, noise);
  const Vector logp = safe_log(g.p);
  const double sigma = std::sqrt(g.sigma2);
  const Eigen::Index D = g.dim();
  Matrix x(noise.gumbel.rows(), D);
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    Eigen::Index k = 0;
    (logp + noise.gumbel.row(s).transpose()).maxCoeff(&k);
    x.row(s) = g.theta.row(k) + sigma * noise.eps.block(s, k * D, 1, D);
  }
  return x;
}

Matrix sample_hard(const GmmParams& g, Eigen::Index n, Rng& rng) {
  if (n < 1) throw ValidationError("sample_hard: n must be >= 1");
  return sample_hard(g, draw_mixture_noise(n, g.num_modes(), g.dim(), rng));
}

Matrix sample_relaxed(const GmmParams& g, const MixtureNoise& noise, double temperature) {
  g.validate();
  check_noise(g, noise);
  if (!(temperature > 0.0)) throw ValidationError("sample_relaxed: temperature must be > 0");
  const Vector logp = safe_log(g.p);
  const double sigma = std::sqrt(g.sigma2);
  const Eigen::Index I = g.num_modes(), D = g.dim();
  Matrix x = Matrix::Zero(noise.gumbel.rows(), D);
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    const Vector w = nn::gumbel_softmax(logp, temperature, noise.gumbel.row(s).transpose());
    for (Eigen::Index i = 0; i < I; ++i)
      x.row(s) += w(i) * (g.theta.row(i) + sigma * noise.eps.block(s, i * D, 1, D));
  }
  return x;
}

Matrix sample_relaxed(const GmmParams& g, Eigen::Index n, double temperature, Rng& rng) {
  if (n < 1) throw ValidationError("sample_relaxed: n must be >= 1");
  return sample_relaxed(g, draw_mixture_noise(n, g.num_modes(), g.dim(), rng), temperature);
}

BaseVars bind(nn::Tape& tape, const BasePredictor& bp, bool trainable) {
  BaseVars v;
  if (bp.mode_source == ModeSource::predicted) {
    v.mode_head = nn::bind(tape, bp.mode_head, trainable);
  } else {
    v.free_theta = trainable ? tape.leaf(bp.free_theta) : tape.constant(bp.free_theta);
    v.has_free_theta = true;
  }
  v.weight_head = nn::bind(tape, bp.weight_head, trainable);
  return v;
}

TapedGmm predict_base(const BasePredictor& bp, const BaseVars& vars, const Vector& y,
                      bool train_mode, Rng& rng) {
  check_descriptor(bp, y);
  nn::Tape& tape = *vars.weight_head.weights.front().tape;
  Var x = tape.constant(y.transpose());
  TapedGmm g;
  g.sigma2 = bp.sigma2;
  if (bp.mode_source == ModeSource::predicted) {
    Var flat = nn::mlp_forward(with_mode(bp.mode_head, train_mode), vars.mode_head, x, rng);
    g.theta = nn::reshape(flat, bp.num_modes, bp.dim);
  } else {
    g.theta = vars.free_theta;
  }
  g.logits = nn::mlp_forward(with_mode(bp.weight_head, train_mode), vars.weight_head, x, rng);
  return g;
}

Var sample_relaxed(const TapedGmm& g, const MixtureNoise& noise, double temperature) {
  const Eigen::Index I = g.theta.rows(), D = g.theta.cols();
  if (noise.gumbel.cols() != I || noise.eps.cols() != I * D)
    throw ShapeError("mixture noise does not match the mixture shape");
  const Eigen::Index n = noise.gumbel.rows();
  Var w = nn::gumbel_softmax_rows(nn::broadcast_rows(g.logits, n), noise.gumbel, temperature);
  Var located = nn::matmul(w, g.theta);
  Var spread = nn::scale(nn::mix_rows(w, noise.eps, D), std::sqrt(g.sigma2));
  return nn::add(located, spread);
}

BaseGrads read_grads(const BasePredictor& bp, const BaseVars& vars) {
  BaseGrads g;
  if (bp.mode_source == ModeSource::predicted)
    g.mode_head = nn::read_grads(vars.mode_head);
  else
    g.free_theta = vars.free_theta.grad();
  g.weight_head = nn::read_grads(vars.weight_head);
  return g;
}

nlohmann::json to_json(const GmmParams& g) {
  return {{"theta", matrix_json(g.theta)}, {"p", vector_json(g.p)}, {"sigma2", g.sigma2}};
}

GmmParams gmm_from_json(const nlohmann::json& j) {
  try {
    GmmParams g;
    g.theta = matrix_from_json(j.at("theta"), "base.theta");
    g.p = vector_from_json(j.at("p"), "base.p");
    g.sigma2 = j.at("sigma2").get<double>();
    g.validate();
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("base json: ") + e.what());
  }
}

nlohmann::json to_json(const BasePredictor& bp) {
  nlohmann::json j;
  j["mode_source"] = to_string(bp.mode_source);
  j["num_modes"] = bp.num_modes;
  j["dim"] = bp.dim;
  j["sigma2"] = bp.sigma2;
  j["weight_head"] = nn::to_json(bp.weight_head);
  if (bp.mode_source == ModeSource::predicted)
    j["mode_head"] = nn::to_json(bp.mode_head);
  else
    j["theta"] = matrix_json(bp.free_theta);
  return j;
}

BasePredictor base_predictor_from_json(const nlohmann::json& j) {
  try {
    BasePredictor bp;
    bp.mode_source = mode_source_from_string(j.at("mode_source").get<std::string>());
    bp.num_modes = j.at("num_modes").get<int>();
    bp.dim = j.at("dim").get<int>();
    bp.sigma2 = j.at("sigma2").get<double>();
    bp.weight_head = nn::mlp_from_json(j.at("weight_head"));
    if (bp.mode_source == ModeSource::predicted)
      bp.mode_head = nn::mlp_from_json(j.at("mode_head"));
    else
      bp.free_theta = matrix_from_json(j.at("theta"), bp.num_modes, bp.dim, "base.theta");
    bp.validate();
    return bp;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("base json: ") + e.what());
  }
}

}  // namespace mixflow::mixture
