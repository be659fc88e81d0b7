#include "mixflow/nn/optimizer.hpp"

#include <cmath>

#include "mixflow/common/error.hpp"

namespace mixflow::nn {

OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adam") return OptimizerKind::adam;
  throw ValidationError("unknown optimizer '" + name + "' (expected sgd|adam)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

void opt_step(std::vector<ParamRef> params, OptState& state) {
  for (const ParamRef& p : params) {
    if (p.value == nullptr || p.grad == nullptr)
      throw ValidationError("opt_step: null parameter " + p.path);
    if (p.value->rows() != p.grad->rows() || p.value->cols() != p.grad->cols())
      throw ShapeError("opt_step: gradient shape " + shape_string(*p.grad) +
                       " does not match parameter " + p.path + " " + shape_string(*p.value));
    if (!p.grad->allFinite())
      throw NumericalError("opt_step: non-finite gradient for parameter " + p.path);
  }
  const OptConfig& c = state.config;
  ++state.step;
  if (c.kind == OptimizerKind::sgd) {
    for (ParamRef& p : params) *p.value -= c.lr * (*p.grad);
    return;
  }
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (ParamRef& p : params) {
    auto& m = state.first_moment[p.path];
    auto& v = state.second_moment[p.path];
    if (m.size() == 0) {
      m = Matrix::Zero(p.value->rows(), p.value->cols());
      v = Matrix::Zero(p.value->rows(), p.value->cols());
    }
    m = c.beta1 * m + (1.0 - c.beta1) * (*p.grad);
    v = c.beta2 * v + (1.0 - c.beta2) * p.grad->cwiseProduct(*p.grad);
    Matrix mhat = m / bias1;
    Matrix vhat = v / bias2;
    p.value->array() -= c.lr * mhat.array() / (vhat.array().sqrt() + c.eps);
  }
}

namespace {

nlohmann::json flat(const Matrix& m) {
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data(m.data(), m.data() + m.size());
  j["data"] = data;  // column-major
  return j;
}

Matrix unflat(const nlohmann::json& j) {
  Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != m.size())
    throw ShapeError("opt_state json: data length mismatch");
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

}  // namespace

nlohmann::json to_json(const OptState& state) {
  nlohmann::json j;
  j["kind"] = to_string(state.config.kind);
  j["lr"] = state.config.lr;
  j["beta1"] = state.config.beta1;
  j["beta2"] = state.config.beta2;
  j["eps"] = state.config.eps;
  j["step"] = state.step;
  nlohmann::json m = nlohmann::json::object(), v = nlohmann::json::object();
  for (const auto& [k, x] : state.first_moment) m[k] = flat(x);
  for (const auto& [k, x] : state.second_moment) v[k] = flat(x);
  j["first_moment"] = std::move(m);
  j["second_moment"] = std::move(v);
  return j;
}

OptState opt_state_from_json(const nlohmann::json& j) {
  OptState s;
  s.config.kind = optimizer_from_string(j.value("kind", "adam"));
  s.config.lr = j.value("lr", 1e-3);
  s.config.beta1 = j.value("beta1", 0.9);
  s.config.beta2 = j.value("beta2", 0.999);
  s.config.eps = j.value("eps", 1e-8);
  s.step = j.value("step", 0LL);
  if (j.contains("first_moment"))
    for (const auto& [k, x] : j["first_moment"].items()) s.first_moment[k] = unflat(x);
  if (j.contains("second_moment"))
    for (const auto& [k, x] : j["second_moment"].items()) s.second_moment[k] = unflat(x);
  return s;
}

}  // namespace mixflow::nn
