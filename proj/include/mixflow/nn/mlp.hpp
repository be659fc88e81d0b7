#pragma once

#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mixflow/common/rng.hpp"
#include "mixflow/common/types.hpp"
#include "mixflow/nn/tape.hpp"

namespace mixflow::nn {

enum class Activation { relu, tanh, silu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

// Dense feedforward network. weights[l] is (layer_sizes[l+1] x layer_sizes[l]),
// biases[l] is (1 x layer_sizes[l+1]). Hidden layers use `activation`
// followed by inverted dropout when train_mode is set; the output layer is
// linear.
struct MlpParams {
  std::vector<int> layer_sizes;
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;
  Activation activation = Activation::relu;
  double dropout_rate = 0.0;
  bool train_mode = false;

  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  std::size_t num_layers() const { return weights.size(); }
  void validate() const;
};

// Random init: weights ~ N(0, gain^2 / fan_in), zero biases.
MlpParams make_mlp(std::vector<int> layer_sizes, Activation activation,
                   double dropout_rate, Rng& rng, double gain = 1.0);

MlpParams zero_mlp(std::vector<int> layer_sizes, Activation activation);

// Single-point evaluation.
Vector mlp_forward(const MlpParams& params, const Vector& x, Rng& rng);

// Batched evaluation, one input per row. Draws dropout masks from `rng`
// in the same order as the taped forward pass.
Matrix mlp_forward_batch(const MlpParams& params, const Matrix& x, Rng& rng);

// Parameters bound as leaves on a tape.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

MlpVars bind(Tape& tape, const MlpParams& params, bool trainable = true);

Var mlp_forward(const MlpParams& params, const MlpVars& vars, Var x, Rng& rng);

// Gradients read back from a tape after backward().
struct MlpGrads {
  std::vector<Matrix> weights;
  std::vector<Matrix> biases;
};

MlpGrads read_grads(const MlpVars& vars);

nlohmann::json to_json(const MlpParams& params);
MlpParams mlp_from_json(const nlohmann::json& j);

}  // namespace mixflow::nn
