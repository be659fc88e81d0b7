#pragma once

#include <cstddef>
#include <vector>

#include "mixflow/common/types.hpp"

namespace mixflow::ot {

// Permutation tau of {0..S-1}: row s of the first set is matched to row
// tau[s] of the second.
struct Pairing {
  std::vector<std::size_t> tau;

  std::size_t size() const { return tau.size(); }
  bool is_bijection() const;
};

inline constexpr std::size_t kDefaultPairingCap = 512;

// Exact minimum-cost perfect matching on a square cost matrix (shortest
// augmenting path with potentials, O(n^3)). Returns tau with row s matched
// to column tau[s].
std::vector<std::size_t> solve_assignment(const Matrix& cost);

// Mini-batch OT pairing: tau minimizes sum_s ||b[tau(s)] - a[s]||^2.
// Rejects unequal batch sizes and batches larger than `cap`.
Pairing assignment_pairing(const Matrix& a, const Matrix& b,
                           std::size_t cap = kDefaultPairingCap);

// Sum of squared distances of a pairing.
double pairing_cost(const Matrix& a, const Matrix& b, const Pairing& tau);

Matrix sq_euclidean_cost(const Matrix& a, const Matrix& b);
Matrix euclidean_cost(const Matrix& a, const Matrix& b);

}  // namespace mixflow::ot
