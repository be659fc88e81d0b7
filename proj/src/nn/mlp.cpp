#include "mixflow/nn/mlp.hpp"

#include <cmath>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/common/json_io.hpp"

namespace mixflow::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::silu: return "silu";
  }
  return "relu";
}

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "silu") return Activation::silu;
  throw ValidationError("unknown activation '" + name + "' (expected relu|tanh|silu)");
}

void MlpParams::validate() const {
  if (layer_sizes.size() < 2) throw ShapeError("mlp: need at least input and output sizes");
  for (int s : layer_sizes)
    if (s <= 0) throw ShapeError("mlp: layer sizes must be positive");
  if (weights.size() != layer_sizes.size() - 1 || biases.size() != weights.size())
    throw ShapeError("mlp: parameter count does not match layer_sizes");
  for (std::size_t l = 0; l < weights.size(); ++l) {
    require_shape(weights[l], layer_sizes[l + 1], layer_sizes[l],
                  "mlp weight " + std::to_string(l));
    require_shape(biases[l], 1, layer_sizes[l + 1], "mlp bias " + std::to_string(l));
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw ValidationError("mlp: dropout_rate must lie in [0, 1)");
}

MlpParams make_mlp(std::vector<int> layer_sizes, Activation activation,
                   double dropout_rate, Rng& rng, double gain) {
  MlpParams p = zero_mlp(std::move(layer_sizes), activation);
  p.dropout_rate = dropout_rate;
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    double sd = gain / std::sqrt(static_cast<double>(p.layer_sizes[l]));
    p.weights[l] = standard_normal(p.layer_sizes[l + 1], p.layer_sizes[l], rng) * sd;
  }
  p.validate();
  return p;
}

MlpParams zero_mlp(std::vector<int> layer_sizes, Activation activation) {
  MlpParams p;
  p.layer_sizes = std::move(layer_sizes);
  p.activation = activation;
  if (p.layer_sizes.size() < 2) throw ShapeError("mlp: need at least input and output sizes");
  for (std::size_t l = 0; l + 1 < p.layer_sizes.size(); ++l) {
    p.weights.push_back(Matrix::Zero(p.layer_sizes[l + 1], p.layer_sizes[l]));
    p.biases.push_back(Matrix::Zero(1, p.layer_sizes[l + 1]));
  }
  return p;
}

namespace {

bool dropout_active(const MlpParams& p) { return p.train_mode && p.dropout_rate > 0.0; }

Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = keep(rng) ? scale : 0.0;
  return m;
}

Matrix activate(const Matrix& x, Activation a) {
  switch (a) {
    case Activation::relu: return x.cwiseMax(0.0);
    case Activation::tanh: return x.array().tanh().matrix();
    case Activation::silu:
      return x.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
  }
  return x;
}

Var activate(Var x, Activation a) {
  switch (a) {
    case Activation::relu: return relu(x);
    case Activation::tanh: return tanh(x);
    case Activation::silu: return silu(x);
  }
  return x;
}

}  // namespace

Vector mlp_forward(const MlpParams& params, const Vector& x, Rng& rng) {
  Matrix row = x.transpose();
  return mlp_forward_batch(params, row, rng).row(0).transpose();
}

namespace {

// z = h W^T + b with every output entry accumulated over the input index in
// a fixed order, so a row's result does not depend on the batch it sits in.
Matrix affine_rows(const Matrix& h, const Matrix& w, const Matrix& b) {
  Matrix z(h.rows(), w.rows());
  for (Eigen::Index o = 0; o < w.rows(); ++o) {
    auto col = z.col(o);
    col.setConstant(b(0, o));
    for (Eigen::Index k = 0; k < w.cols(); ++k) col += w(o, k) * h.col(k);
  }
  return z;
}

}  // namespace

Matrix mlp_forward_batch(const MlpParams& params, const Matrix& x, Rng& rng) {
  if (x.cols() != params.input_size()) {
    std::ostringstream os;
    os << "mlp_forward: input has " << x.cols() << " features, network expects "
       << params.input_size();
    throw ShapeError(os.str());
  }
  Matrix h = x;
  const std::size_t L = params.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Matrix z = affine_rows(h, params.weights[l], params.biases[l]);
    if (l + 1 == L) return z;
    h = activate(z, params.activation);
    if (dropout_active(params))
      h = h.cwiseProduct(dropout_mask(h.rows(), h.cols(), params.dropout_rate, rng));
  }
  return h;
}

MlpVars bind(Tape& tape, const MlpParams& params, bool trainable) {
  MlpVars v;
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    v.weights.push_back(trainable ? tape.leaf(params.weights[l])
                                  : tape.constant(params.weights[l]));
    v.biases.push_back(trainable ? tape.leaf(params.biases[l])
                                 : tape.constant(params.biases[l]));
  }
  return v;
}

Var mlp_forward(const MlpParams& params, const MlpVars& vars, Var x, Rng& rng) {
  if (x.cols() != params.input_size()) {
    std::ostringstream os;
    os << "mlp_forward: input has " << x.cols() << " features, network expects "
       << params.input_size();
    throw ShapeError(os.str());
  }
  Var h = x;
  const std::size_t L = params.num_layers();
  for (std::size_t l = 0; l < L; ++l) {
    Var z = add_row(matmul_nt(h, vars.weights[l]), vars.biases[l]);
    if (l + 1 == L) return z;
    h = activate(z, params.activation);
    if (dropout_active(params))
      h = mask_mul(h, dropout_mask(h.rows(), h.cols(), params.dropout_rate, rng));
  }
  return h;
}

MlpGrads read_grads(const MlpVars& vars) {
  MlpGrads g;
  for (const Var& w : vars.weights) g.weights.push_back(w.grad());
  for (const Var& b : vars.biases) g.biases.push_back(b.grad());
  return g;
}

nlohmann::json to_json(const MlpParams& params) {
  nlohmann::json j;
  j["layer_sizes"] = params.layer_sizes;
  nlohmann::json w = nlohmann::json::array();
  nlohmann::json b = nlohmann::json::array();
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    w.push_back(matrix_json(params.weights[l]));
    nlohmann::json bias = nlohmann::json::array();
    for (Eigen::Index c = 0; c < params.biases[l].cols(); ++c)
      bias.push_back(params.biases[l](0, c));
    b.push_back(std::move(bias));
  }
  j["weights"] = std::move(w);
  j["biases"] = std::move(b);
  j["activation"] = to_string(params.activation);
  j["dropout_rate"] = params.dropout_rate;
  return j;
}

MlpParams mlp_from_json(const nlohmann::json& j) {
  try {
    MlpParams p = zero_mlp(j.at("layer_sizes").get<std::vector<int>>(),
                           activation_from_string(j.value("activation", "relu")));
    p.dropout_rate = j.value("dropout_rate", 0.0);
    const auto& w = j.at("weights");
    const auto& b = j.at("biases");
    if (w.size() != p.num_layers() || b.size() != p.num_layers())
      throw ShapeError("mlp json: layer count mismatch");
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
      p.weights[l] = matrix_from_json(w[l], p.layer_sizes[l + 1], p.layer_sizes[l],
                                      "mlp json weight " + std::to_string(l));
      if (b[l].size() != static_cast<std::size_t>(p.layer_sizes[l + 1]))
        throw ShapeError("mlp json: bias " + std::to_string(l) + " has wrong length");
      for (int c = 0; c < p.layer_sizes[l + 1]; ++c) p.biases[l](0, c) = b[l][c].get<double>();
    }
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("mlp json: ") + e.what());
  }
}

}  // namespace mixflow::nn
