#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mixflow/common/rng.hpp"
#include "mixflow/common/types.hpp"
#include "mixflow/mixture/gmm.hpp"
#include "mixflow/nn/mlp.hpp"
#include "mixflow/ot/assignment.hpp"

namespace mixflow::flow {

// v(x, t; y) as an MLP on the features [x | t | y].
struct VelocityField {
  nn::MlpParams net;
  int dim = 1;
  int descriptor_size = 0;

  void validate() const;
};

VelocityField make_velocity_field(int dim, int descriptor_size, const std::vector<int>& hidden,
                                  nn::Activation activation, double dropout_rate, Rng& rng);

// Rows [x_s | t_s | y].
Matrix velocity_features(const Matrix& x, const Vector& t, const Vector& y);

// Batched evaluation in eval mode (no dropout).
Matrix velocity(const VelocityField& v, const Matrix& x, double t, const Vector& y);

enum class Method { euler, rk4 };
std::string to_string(Method m);
Method method_from_string(const std::string& name);

struct IntegratorConfig {
  Method method = Method::rk4;
  int steps = 100;
  void validate() const;
};

// (1 - t) x0 + t x1, rows paired.
Matrix interpolate(const Matrix& x0, const Matrix& x1, double t);

struct VelocityLoss {
  double value = 0.0;
  nn::MlpGrads grads;
};

// Mean over s of ||v(x_t, t; y) - (x1[tau(s)] - x0[s])||^2 with
// x_t = (1 - t) x0[s] + t x1[tau(s)]. Base samples are constants. `t` holds
// either one shared time or one time per row. `rng` drives dropout when the
// network is in train mode.
VelocityLoss loss_ot(const VelocityField& v, const Matrix& base, const Matrix& target,
                     const ot::Pairing& tau, const Vector& t, const Vector& y, Rng& rng);

// Vanilla CFM: x0 ~ N(0, I), independent coupling unless `ot_pairing`.
VelocityLoss loss_cfm_baseline(const VelocityField& v, const Matrix& target, const Vector& t,
                               const Vector& y, bool ot_pairing, Rng& rng);

struct GeoLoss {
  double value = 0.0;
  mixture::BaseGrads grads;
  Matrix base_samples;  // relaxed draws used for the pairing
  ot::Pairing tau;
};

// Mean squared paired distance between relaxed base draws and the targets,
// differentiated w.r.t. the base predictor. The pairing is a constant of
// the draw. `dropout_rng` drives the heads' dropout in train mode.
GeoLoss loss_geo(const mixture::BasePredictor& bp, const Matrix& target, const Vector& y,
                 double temperature, const mixture::MixtureNoise& noise, bool train_mode,
                 Rng& dropout_rng);
GeoLoss loss_geo(const mixture::BasePredictor& bp, const Matrix& target, const Vector& y,
                 double temperature, bool train_mode, Rng& rng);

// Endpoint at t = 1. Rows are integrated independently, so the result for
// a row does not depend on the other rows of the batch.
Matrix integrate(const VelocityField& v, const Matrix& x0, const Vector& y,
                 const IntegratorConfig& cfg);

// States at the requested times (each in [0, 1]), in the order given. Times
// are rounded to the step grid k / steps.
std::vector<Matrix> integrate_snapshots(const VelocityField& v, const Matrix& x0, const Vector& y,
                                        const IntegratorConfig& cfg,
                                        const std::vector<double>& times);

nlohmann::json to_json(const VelocityField& v);
VelocityField velocity_from_json(const nlohmann::json& j);

}  // namespace mixflow::flow
