#pragma once

#include "mixflow/common/rng.hpp"
#include "mixflow/common/types.hpp"

namespace mixflow::nn {

// Standard Gumbel(0, 1) noise, -log(-log U).
Matrix gumbel_noise(Eigen::Index rows, Eigen::Index cols, Rng& rng);

// Relaxed one-hot draw softmax((logits + g) / temperature). The result lies
// on the open simplex: entries are floored at the smallest normal double.
Vector gumbel_softmax(const Vector& logits, double temperature, Rng& rng);

// Same, with caller-supplied noise.
Vector gumbel_softmax(const Vector& logits, double temperature, const Vector& noise);

Vector softmax(const Vector& logits);

}  // namespace mixflow::nn
