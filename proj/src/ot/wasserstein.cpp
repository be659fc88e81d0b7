#include "mixflow/ot/wasserstein.hpp"

#include <cmath>

#include "mixflow/common/error.hpp"
#include "mixflow/ot/assignment.hpp"
#include "mixflow/ot/transport.hpp"

namespace mixflow::ot {

namespace {

Matrix ground_cost(const Matrix& x, const Matrix& y, int order) {
  if (order != 1 && order != 2)
    throw ValidationError("empirical_wasserstein: order must be 1 or 2, got " +
                          std::to_string(order));
  if (x.rows() == 0 || y.rows() == 0)
    throw ValidationError("empirical_wasserstein: point sets must be nonempty");
  if (!x.allFinite() || !y.allFinite())
    throw ValidationError("empirical_wasserstein: non-finite coordinates");
  return order == 1 ? euclidean_cost(x, y) : sq_euclidean_cost(x, y);
}

double finish(double value, int order) {
  value = std::max(0.0, value);
  return order == 2 ? std::sqrt(value) : value;
}

}  // namespace

double empirical_wasserstein(const Matrix& x, const Matrix& y, int order) {
  Matrix c = ground_cost(x, y, order);
  if (x.rows() != y.rows()) return empirical_wasserstein_lp(x, y, order);
  const auto tau = solve_assignment(c);
  double total = 0.0;
  for (Eigen::Index s = 0; s < c.rows(); ++s) total += c(s, static_cast<Eigen::Index>(tau[s]));
  return finish(total / static_cast<double>(c.rows()), order);
}

double empirical_wasserstein_lp(const Matrix& x, const Matrix& y, int order) {
  Matrix c = ground_cost(x, y, order);
  const Vector p = Vector::Constant(x.rows(), 1.0 / static_cast<double>(x.rows()));
  const Vector q = Vector::Constant(y.rows(), 1.0 / static_cast<double>(y.rows()));
  TransportOptions opt;
  opt.strict_dual = false;
  const auto res = solve_transport(CostMatrix(c, order == 1 ? CostMetric::euclidean
                                                             : CostMetric::sq_euclidean),
                                   p, q, opt);
  return finish(res.plan.objective, order);
}

}  // namespace mixflow::ot
