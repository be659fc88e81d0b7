#include "mixflow/nn/gumbel.hpp"

#include <cmath>
#include <limits>

#include "mixflow/common/error.hpp"

namespace mixflow::nn {

Matrix gumbel_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix g(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) g(r, c) = -std::log(-std::log(open_uniform(rng)));
  return g;
}

Vector softmax(const Vector& logits) {
  if (!logits.allFinite()) throw ValidationError("softmax: non-finite logits");
  Vector e = (logits.array() - logits.maxCoeff()).exp().matrix();
  e /= e.sum();
  return e.cwiseMax(std::numeric_limits<double>::min());
}

Vector gumbel_softmax(const Vector& logits, double temperature, const Vector& noise) {
  if (!(temperature > 0.0)) throw ValidationError("gumbel_softmax: temperature must be > 0");
  if (!logits.allFinite()) throw ValidationError("gumbel_softmax: non-finite logits");
  if (noise.size() != logits.size()) throw ShapeError("gumbel_softmax: noise length mismatch");
  return softmax((logits + noise) / temperature);
}

Vector gumbel_softmax(const Vector& logits, double temperature, Rng& rng) {
  Vector g = gumbel_noise(1, logits.size(), rng).row(0).transpose();
  return gumbel_softmax(logits, temperature, g);
}

}  // namespace mixflow::nn
