#pragma once

#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mixflow/common/types.hpp"

namespace mixflow::nn {

enum class OptimizerKind { sgd, adam };

OptimizerKind optimizer_from_string(const std::string& name);
std::string to_string(OptimizerKind k);

struct OptConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Moment accumulators keyed by parameter path ("velocity.w0", ...).
struct OptState {
  OptConfig config;
  long long step = 0;
  std::map<std::string, Matrix> first_moment;
  std::map<std::string, Matrix> second_moment;
};

// A parameter tensor with its gradient, addressed by a stable path.
struct ParamRef {
  std::string path;
  Matrix* value;
  const Matrix* grad;
};

// Applies one update to every parameter in `params`. All gradients are
// checked before anything is written: a non-finite entry raises
// NumericalError naming the parameter and leaves every value untouched.
void opt_step(std::vector<ParamRef> params, OptState& state);

nlohmann::json to_json(const OptState& state);
OptState opt_state_from_json(const nlohmann::json& j);

}  // namespace mixflow::nn
