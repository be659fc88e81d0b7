#pragma once

#include <nlohmann/json.hpp>
#include <string>

#include "mixflow/common/rng.hpp"
#include "mixflow/common/types.hpp"
#include "mixflow/nn/mlp.hpp"
#include "mixflow/nn/tape.hpp"

namespace mixflow::mixture {

// Isotropic Gaussian mixture with shared variance.
struct GmmParams {
  Matrix theta;  // I x D mode locations
  Vector p;      // mode weights
  double sigma2 = 1e-2;

  Eigen::Index num_modes() const { return theta.rows(); }
  Eigen::Index dim() const { return theta.cols(); }
  void validate() const;
};

// Standard normal N(0, I_D) as a one-mode mixture.
GmmParams standard_normal_base(Eigen::Index dim);

enum class ModeSource { predicted, free_parameters };
std::string to_string(ModeSource s);
ModeSource mode_source_from_string(const std::string& name);

// Descriptor-conditioned base. In free_parameters mode the mode locations are
// the table `free_theta` and mode_head is unused.
struct BasePredictor {
  nn::MlpParams mode_head;    // y -> I*D, reshaped row-major
  nn::MlpParams weight_head;  // y -> I logits
  Matrix free_theta;
  double sigma2 = 1e-2;
  ModeSource mode_source = ModeSource::predicted;
  int num_modes = 1;
  int dim = 1;

  int descriptor_size() const { return weight_head.input_size(); }
  void validate() const;
};

struct BaseConfig {
  int num_modes = 1;
  int dim = 2;
  int descriptor_size = 1;
  std::vector<int> hidden = {64};
  nn::Activation activation = nn::Activation::relu;
  double dropout_rate = 0.0;
  double sigma2 = 1e-2;
  ModeSource mode_source = ModeSource::predicted;
  double init_gain = 0.1;
};

BasePredictor make_base_predictor(const BaseConfig& cfg, Rng& rng);

// Evaluates both heads. With train_mode=false dropout is off and the result
// does not depend on rng.
GmmParams predict_base(const BasePredictor& bp, const Vector& y, bool train_mode, Rng& rng);

// Noise consumed by one sampling call: Gumbel draws (n x I) for the
// component choice and standard normals (n x I*D), block i used by mode i.
struct MixtureNoise {
  Matrix gumbel;
  Matrix eps;
};
MixtureNoise draw_mixture_noise(Eigen::Index n, Eigen::Index num_modes, Eigen::Index dim,
                                Rng& rng);

// Ancestral sampling; component via the Gumbel-max trick.
Matrix sample_hard(const GmmParams& g, Eigen::Index n, Rng& rng);
Matrix sample_hard(const GmmParams& g, const MixtureNoise& noise);

// x = sum_i w_i (theta_i + sigma eps_i), w = gumbel_softmax(log p, temperature).
Matrix sample_relaxed(const GmmParams& g, Eigen::Index n, double temperature, Rng& rng);
Matrix sample_relaxed(const GmmParams& g, const MixtureNoise& noise, double temperature);

// ---- differentiable path --------------------------------------------------

struct BaseVars {
  nn::MlpVars mode_head;
  nn::MlpVars weight_head;
  nn::Var free_theta;
  bool has_free_theta = false;
};

BaseVars bind(nn::Tape& tape, const BasePredictor& bp, bool trainable = true);

struct TapedGmm {
  nn::Var theta;   // I x D
  nn::Var logits;  // 1 x I
  double sigma2 = 1e-2;
};

TapedGmm predict_base(const BasePredictor& bp, const BaseVars& vars, const Vector& y,
                      bool train_mode, Rng& rng);

// Relaxed samples with gradients flowing to theta and the logits.
nn::Var sample_relaxed(const TapedGmm& g, const MixtureNoise& noise, double temperature);

// Gradients of the predictor parameters after backward().
struct BaseGrads {
  nn::MlpGrads mode_head;
  nn::MlpGrads weight_head;
  Matrix free_theta;
};
BaseGrads read_grads(const BasePredictor& bp, const BaseVars& vars);

nlohmann::json to_json(const GmmParams& g);
GmmParams gmm_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BasePredictor& bp);
BasePredictor base_predictor_from_json(const nlohmann::json& j);

}  // namespace mixflow::mixture
