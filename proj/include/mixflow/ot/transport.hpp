#pragma once

#include "mixflow/common/types.hpp"

namespace mixflow::ot {

enum class CostMetric { sq_euclidean, euclidean };

// Nonnegative finite I x J transport cost.
class CostMatrix {
 public:
  CostMatrix(Matrix entries, CostMetric metric = CostMetric::sq_euclidean);

  static CostMatrix between(const Matrix& from, const Matrix& to, CostMetric metric);

  const Matrix& entries() const { return entries_; }
  CostMetric metric() const { return metric_; }
  Eigen::Index rows() const { return entries_.rows(); }
  Eigen::Index cols() const { return entries_.cols(); }
  double operator()(Eigen::Index i, Eigen::Index j) const { return entries_(i, j); }

 private:
  Matrix entries_;
  CostMetric metric_;
};

// Row-conditional plan: v(i, j) is the fraction of source mass p_i sent to
// target j, so rows sum to 1 and sum_i v(i, j) p_i = q_j.
struct TransportPlan {
  Matrix v;
  Vector p;
  Vector q;
  double objective = 0.0;

  // Coupling pi(i, j) = v(i, j) * p_i.
  Matrix coupling() const;
  // Entries whose coupling mass exceeds `threshold_factor * max(p)`.
  Eigen::Index support_size(double threshold_factor = 1e-10) const;
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> support(
      double threshold_factor = 1e-10) const;
};

// Dual in the scaled form
//   max sum_i z_i + sum_j q_j z_{I+j}
//   s.t. z_i + p_i z_{I+j} <= p_i c_ij.
// Anchored so that the coupling-form potential of row 0 is zero.
struct DualSolution {
  Vector z;
  double objective = 0.0;

  Vector head(Eigen::Index num_rows) const { return z.head(num_rows); }
  Vector tail(Eigen::Index num_rows) const { return z.tail(z.size() - num_rows); }
};

struct TransportResult {
  TransportPlan plan;
  DualSolution dual;
  // Fewer than I+J-1 strictly positive coupling entries.
  bool degenerate = false;
  // Number of simplex pivots performed.
  long long pivots = 0;
};

struct TransportOptions {
  // Replace a degenerate vertex dual by a strictly complementary one (tight
  // exactly on the plan support where ties allow). Costs a few Bellman-Ford
  // passes over the support components.
  bool strict_dual = true;
  // Bland's smallest-index entering rule instead of most-negative pricing.
  bool bland = false;
  long long max_pivots = 0;  // 0 = automatic
};

// Exact transportation simplex in coupling variables with symbolic
// epsilon-perturbation of the marginals. The reported plan is the
// unperturbed basic solution of the optimal basis.
TransportResult solve_transport(const CostMatrix& cost, const Vector& p, const Vector& q,
                                const TransportOptions& options = {});

// Throws ValidationError unless w is a simplex vector within `tol`.
void require_simplex(const Vector& w, const char* name, double tol = 1e-9);

// Converts coupling-form potentials (u_i + w_j <= c_ij) to the scaled form.
Vector scaled_dual(const Vector& u, const Vector& w, const Vector& p);

double dual_objective(const DualSolution& dual, const Vector& q);

// Largest violation of z_i + p_i z_{I+j} <= p_i c_ij (0 when feasible).
double dual_violation(const CostMatrix& cost, const Vector& p, const Vector& z);

}  // namespace mixflow::ot
