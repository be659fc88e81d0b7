#include "mixflow/ot/assignment.hpp"

#include <limits>
#include <sstream>

#include "mixflow/common/error.hpp"

namespace mixflow::ot {

bool Pairing::is_bijection() const {
  std::vector<bool> seen(tau.size(), false);
  for (std::size_t t : tau) {
    if (t >= tau.size() || seen[t]) return false;
    seen[t] = true;
  }
  return true;
}

Matrix sq_euclidean_cost(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw ShapeError("cost: point dimensions differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()) + ")");
  Matrix c(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) c(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  return c;
}

Matrix euclidean_cost(const Matrix& a, const Matrix& b) {
  return sq_euclidean_cost(a, b).cwiseSqrt();
}

std::vector<std::size_t> solve_assignment(const Matrix& cost) {
  if (cost.rows() != cost.cols())
    throw ShapeError("assignment: cost matrix must be square, got " + shape_string(cost));
  if (!cost.allFinite()) throw ValidationError("assignment: non-finite cost entry");
  const std::size_t n = static_cast<std::size_t>(cost.rows());
  if (n == 0) return {};
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based arrays; column 0 is the virtual source of each augmentation.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> tau(n);
  for (std::size_t j = 1; j <= n; ++j) tau[owner[j] - 1] = j - 1;
  return tau;
}

Pairing assignment_pairing(const Matrix& a, const Matrix& b, std::size_t cap) {
  if (a.rows() != b.rows()) {
    std::ostringstream os;
    os << "assignment_pairing: batch sizes differ (" << a.rows() << " vs " << b.rows() << ")";
    throw ValidationError(os.str());
  }
  if (static_cast<std::size_t>(a.rows()) > cap) {
    std::ostringstream os;
    os << "assignment_pairing: batch size " << a.rows() << " exceeds the cap of " << cap
       << "; lower the batch size";
    throw ValidationError(os.str());
  }
  return Pairing{solve_assignment(sq_euclidean_cost(a, b))};
}

double pairing_cost(const Matrix& a, const Matrix& b, const Pairing& tau) {
  double total = 0.0;
  for (std::size_t s = 0; s < tau.size(); ++s)
    total += (b.row(static_cast<Eigen::Index>(tau.tau[s])) - a.row(static_cast<Eigen::Index>(s)))
                 .squaredNorm();
  return total;
}

}  // namespace mixflow::ot
