#include "mixflow/theory/theory.hpp"

#include <algorithm>
#include <bit>
#include <cfloat>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/common/parallel.hpp"
#include "mixflow/nn/mlp.hpp"
#include "mixflow/nn/optimizer.hpp"
#include "mixflow/ot/assignment.hpp"

namespace mixflow::theory {

void GmmMeasure::validate(const char* what) const {
  if (modes.rows() == 0 || modes.cols() == 0)
    throw ShapeError(std::string(what) + ": needs at least one mode and one dimension");
  if (weights.size() != modes.rows())
    throw ShapeError(std::string(what) + ": " + std::to_string(modes.rows()) + " modes but " +
                     std::to_string(weights.size()) + " weights");
  if (!modes.allFinite()) throw ValidationError(std::string(what) + ": non-finite mode");
  ot::require_simplex(weights, what);
}

MwResult mixture_wasserstein(const GmmMeasure& a, const GmmMeasure& b) {
  a.validate("first measure");
  b.validate("second measure");
  if (a.dim() != b.dim())
    throw ShapeError("measures live in dimensions " + std::to_string(a.dim()) + " and " +
                     std::to_string(b.dim()));
  const ot::CostMatrix cost =
      ot::CostMatrix::between(a.modes, b.modes, ot::CostMetric::sq_euclidean);
  ot::TransportResult r = ot::solve_transport(cost, a.weights, b.weights);
  return {r.plan.objective, std::move(r.plan), std::move(r.dual)};
}

// --- subset sums -------------------------------------------------------------

namespace {

std::vector<double> all_subset_sums(const Vector& x) {
  const std::uint32_t n = 1u << x.size();
  std::vector<double> s(n, 0.0);
  for (std::uint32_t m = 1; m < n; ++m) s[m] = s[m & (m - 1)] + x(std::countr_zero(m));
  return s;
}

}  // namespace

SubsetSumResult check_subset_sum(const Vector& p, const Vector& q, double tolerance) {
  if (p.size() == 0 || q.size() == 0) throw ShapeError("subset sums need nonempty marginals");
  if (p.size() > kSubsetSumCap || q.size() > kSubsetSumCap)
    throw ValidationError("subset-sum enumeration is capped at " + std::to_string(kSubsetSumCap) +
                          " entries per marginal, got " + std::to_string(p.size()) + " and " +
                          std::to_string(q.size()));
  SubsetSumResult out;
  out.min_gap = std::numeric_limits<double>::infinity();
  const std::vector<double> sp = all_subset_sums(p), sq = all_subset_sums(q);
  const std::uint32_t full_p = static_cast<std::uint32_t>(sp.size()) - 1;
  const std::uint32_t full_q = static_cast<std::uint32_t>(sq.size()) - 1;
  if (full_p < 2 || full_q < 2) return out;  // a singleton has no proper nonempty subset

  std::vector<std::pair<double, std::uint32_t>> qs;
  qs.reserve(full_q - 1);
  for (std::uint32_t m = 1; m < full_q; ++m) qs.emplace_back(sq[m], m);
  std::sort(qs.begin(), qs.end());

  for (std::uint32_t m = 1; m < full_p; ++m) {
    const double s = sp[m];
    auto it = std::lower_bound(qs.begin(), qs.end(), std::make_pair(s, std::uint32_t{0}));
    for (auto cand : {it, it == qs.begin() ? qs.end() : std::prev(it)}) {
      if (cand == qs.end()) continue;
      const double gap = std::abs(cand->first - s);
      if (gap < out.min_gap) out.min_gap = gap;
      if (out.holds && gap <= tolerance) {
        out.holds = false;
        out.p_mask = m;
        out.q_mask = cand->second;
      }
    }
  }
  return out;
}

// --- dual completion ---------------------------------------------------------

namespace {

void require_positive(const Vector& p, const char* what) {
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (!(p(i) > 0.0))
      throw ValidationError(std::string(what) + "[" + std::to_string(i) +
                            "] must be strictly positive, got " + std::to_string(p(i)));
}

void require_modes(const Matrix& theta, const Matrix& gamma) {
  if (theta.rows() == 0 || gamma.rows() == 0) throw ShapeError("empty mode matrix");
  if (theta.cols() != gamma.cols())
    throw ShapeError("theta has dimension " + std::to_string(theta.cols()) + ", gamma " +
                     std::to_string(gamma.cols()));
}

Matrix mode_costs(const Matrix& theta, const Matrix& gamma) {
  return ot::sq_euclidean_cost(theta, gamma);
}

}  // namespace

DualCompletion support_from_dual(const Matrix& theta, const Matrix& gamma, const Vector& p,
                                 const Vector& z_head, double tight_tol) {
  require_modes(theta, gamma);
  const Eigen::Index I = theta.rows(), J = gamma.rows();
  if (p.size() != I || z_head.size() != I)
    throw ShapeError("p and z_head must have one entry per base mode (" + std::to_string(I) + ")");
  require_positive(p, "p");
  const Matrix c = mode_costs(theta, gamma);
  Matrix slack(I, J);
  for (Eigen::Index i = 0; i < I; ++i) slack.row(i) = c.row(i).array() - z_head(i) / p(i);

  DualCompletion out;
  out.tail = slack.colwise().minCoeff().transpose();
  out.tail_max = slack.colwise().maxCoeff().transpose();
  const double tol = tight_tol * std::max(1.0, c.maxCoeff());
  out.max_min_disagree = ((out.tail_max - out.tail).array() > tol).any();
  out.pattern.resize(I, J);
  for (Eigen::Index i = 0; i < I; ++i)
    for (Eigen::Index j = 0; j < J; ++j) out.pattern(i, j) = slack(i, j) - out.tail(j) <= tol;
  for (Eigen::Index i = 0; i < I; ++i)
    if (!out.pattern.row(i).any()) out.uncovered_rows.push_back(static_cast<int>(i));
  return out;
}

// --- projection --------------------------------------------------------------

namespace {

struct Partition {
  std::vector<int> label;
  Matrix centers;
  Vector mass;
  double cost = 0.0;
};

void recompute(const Matrix& x, const Vector& w, Partition& part) {
  const Eigen::Index k = part.centers.rows();
  Matrix sums = Matrix::Zero(k, x.cols());
  part.mass = Vector::Zero(k);
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    sums.row(part.label[j]) += w(j) * x.row(j);
    part.mass(part.label[j]) += w(j);
  }
  for (Eigen::Index i = 0; i < k; ++i)
    if (part.mass(i) > 0.0) part.centers.row(i) = sums.row(i) / part.mass(i);
  part.cost = 0.0;
  for (Eigen::Index j = 0; j < x.rows(); ++j)
    part.cost += w(j) * (x.row(j) - part.centers.row(part.label[j])).squaredNorm();
}

int nearest(const Matrix& centers, const RowVector& xj) {
  int best = 0;
  double bd = (centers.row(0) - xj).squaredNorm();
  for (Eigen::Index i = 1; i < centers.rows(); ++i) {
    const double d = (centers.row(i) - xj).squaredNorm();
    if (d < bd) {
      bd = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Weighted k-means++ seeding over distinct indices.
Matrix seed_centers(const Matrix& x, const Vector& w, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  std::vector<bool> used(n, false);
  Matrix centers(k, x.cols());
  Vector d2 = Vector::Constant(n, std::numeric_limits<double>::infinity());
  for (int c = 0; c < k; ++c) {
    Vector score(n);
    for (Eigen::Index j = 0; j < n; ++j)
      score(j) = used[j] ? 0.0 : (c == 0 ? w(j) : w(j) * d2(j));
    if (!(score.sum() > 0.0))
      for (Eigen::Index j = 0; j < n; ++j) score(j) = used[j] ? 0.0 : 1.0;
    std::discrete_distribution<Eigen::Index> pick(score.data(), score.data() + n);
    const Eigen::Index j = pick(rng);
    used[j] = true;
    centers.row(c) = x.row(j);
    for (Eigen::Index m = 0; m < n; ++m)
      d2(m) = std::min(d2(m), (x.row(m) - x.row(j)).squaredNorm());
  }
  return centers;
}

// Moves the costliest point into each empty cluster.
bool fill_empty(const Matrix& x, const Vector& w, Partition& part) {
  bool changed = false;
  for (Eigen::Index i = 0; i < part.centers.rows(); ++i) {
    if (part.mass(i) > 0.0) continue;
    Eigen::Index worst = -1;
    double wc = 0.0;
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      const int l = part.label[j];
      if (part.mass(l) <= w(j)) continue;  // would empty its own cluster
      const double cj = w(j) * (x.row(j) - part.centers.row(l)).squaredNorm();
      if (cj > wc) {
        wc = cj;
        worst = j;
      }
    }
    if (worst < 0) continue;
    part.label[worst] = static_cast<int>(i);
    part.centers.row(i) = x.row(worst);
    recompute(x, w, part);
    changed = true;
  }
  return changed;
}

// Best single-point transfer; returns false when none lowers the cost.
bool exchange_step(const Matrix& x, const Vector& w, Partition& part) {
  double best_delta = 0.0;
  Eigen::Index best_j = -1;
  int best_to = -1;
  for (Eigen::Index j = 0; j < x.rows(); ++j) {
    const int a = part.label[j];
    const double ma = part.mass(a);
    if (ma <= w(j)) continue;
    const double removal = w(j) * ma / (ma - w(j)) * (x.row(j) - part.centers.row(a)).squaredNorm();
    for (Eigen::Index b = 0; b < part.centers.rows(); ++b) {
      if (b == a) continue;
      const double mb = part.mass(b);
      const double add = w(j) * mb / (mb + w(j)) * (x.row(j) - part.centers.row(b)).squaredNorm();
      const double delta = add - removal;
      if (delta < best_delta - 1e-15 * (1.0 + part.cost)) {
        best_delta = delta;
        best_j = j;
        best_to = static_cast<int>(b);
      }
    }
  }
  if (best_j < 0) return false;
  part.label[best_j] = best_to;
  return true;
}

void check_monotone(std::vector<double>& trace, double cost) {
  if (!trace.empty() && cost > trace.back() + 1e-12 * (1.0 + trace.back())) {
    std::ostringstream msg;
    msg << "projection objective increased from " << trace.back() << " to " << cost
        << " at step " << trace.size();
    throw NumericalError(msg.str());
  }
  trace.push_back(cost);
}

Partition run_restart(const Matrix& x, const Vector& w, int k, Rng& rng, int max_iterations,
                      std::vector<double>& trace) {
  Partition part;
  part.centers = seed_centers(x, w, k, rng);
  part.label.assign(x.rows(), 0);
  for (int iter = 0; iter < max_iterations; ++iter) {
    bool changed = false;
    for (Eigen::Index j = 0; j < x.rows(); ++j) {
      const int l = nearest(part.centers, x.row(j));
      if (iter == 0 || l != part.label[j]) changed = true;
      part.label[j] = l;
    }
    recompute(x, w, part);
    if (fill_empty(x, w, part)) changed = true;
    check_monotone(trace, part.cost);
    if (!changed) {
      if (!exchange_step(x, w, part)) break;
      recompute(x, w, part);
      check_monotone(trace, part.cost);
    }
  }
  return part;
}

}  // namespace

ProjectionResult project_to_I_modes(const GmmMeasure& target, int num_modes, Rng& rng,
                                    const ProjectionOptions& options) {
  target.validate("target");
  require_positive(target.weights, "target weights");
  if (num_modes < 1 || num_modes > target.size())
    throw ValidationError("projection needs 1 <= I <= J, got I=" + std::to_string(num_modes) +
                          " J=" + std::to_string(target.size()));
  if (options.restarts < 1) throw ValidationError("projection needs at least one restart");

  Partition best;
  std::vector<double> best_trace;
  int best_restart = -1;
  for (int r = 0; r < options.restarts; ++r) {
    std::vector<double> trace;
    Partition part =
        run_restart(target.modes, target.weights, num_modes, rng, options.max_iterations, trace);
    if (best_restart < 0 || part.cost < best.cost) {
      best = std::move(part);
      best_trace = std::move(trace);
      best_restart = r;
    }
  }

  const Eigen::Index I = num_modes, J = target.size();
  ProjectionResult out;
  out.measure.modes = best.centers;
  out.measure.weights = best.mass / best.mass.sum();
  out.assignment = best.label;
  out.trace = std::move(best_trace);
  out.restart = best_restart;

  ot::TransportPlan& plan = out.plan;
  plan.p = out.measure.weights;
  plan.q = target.weights;
  plan.v = Matrix::Zero(I, J);
  const Matrix c = mode_costs(out.measure.modes, target.modes);
  for (Eigen::Index j = 0; j < J; ++j) {
    const int i = best.label[j];
    plan.v(i, j) = target.weights(j) / best.mass(i);
    plan.objective += target.weights(j) * c(i, j);
  }
  for (Eigen::Index i = 0; i < I; ++i)
    if (best.mass(i) <= 0.0) plan.v(i, nearest(target.modes, out.measure.modes.row(i))) = 1.0;
  out.mw2 = plan.objective;

  const ot::TransportResult tr =
      ot::solve_transport(ot::CostMatrix(c), out.measure.weights, target.weights);
  if (tr.plan.objective < plan.objective - 1e-9 * (1.0 + plan.objective)) {
    std::ostringstream msg;
    msg << "hard assignment cost " << plan.objective << " exceeds the transport optimum "
        << tr.plan.objective;
    throw NumericalError(msg.str());
  }
  out.dual = tr.dual;
  return out;
}

BarycentricInstance barycentric_fixed_point(const Matrix& gamma, const Vector& p, const Vector& q,
                                            const Matrix& theta0, int max_iterations) {
  require_modes(theta0, gamma);
  BarycentricInstance out;
  out.theta = theta0;
  out.transport = ot::solve_transport(ot::CostMatrix::between(out.theta, gamma,
                                                              ot::CostMetric::sq_euclidean),
                                      p, q);
  for (out.iterations = 1; out.iterations <= max_iterations; ++out.iterations) {
    out.theta = out.transport.plan.v * gamma;
    ot::TransportResult next = ot::solve_transport(
        ot::CostMatrix::between(out.theta, gamma, ot::CostMetric::sq_euclidean), p, q);
    const bool same = next.plan.support() == out.transport.plan.support();
    out.transport = std::move(next);
    if (same) return out;
  }
  throw NumericalError("barycentric iteration did not settle within " +
                       std::to_string(max_iterations) + " steps");
}

// --- optimality checks -------------------------------------------------------

BarycenterReport verify_barycenter(const Matrix& theta, const Matrix& gamma,
                                   const ot::TransportPlan& plan, double tolerance) {
  require_modes(theta, gamma);
  require_shape(plan.v, theta.rows(), gamma.rows(), "plan");
  BarycenterReport out;
  out.residuals = (theta - plan.v * gamma).rowwise().norm();
  out.max_residual = out.residuals.maxCoeff();
  out.pass = out.max_residual <= tolerance;
  return out;
}

WeightOptimalityReport verify_weight_optimality(const Matrix& theta, const Matrix& gamma,
                                                const ot::TransportPlan& plan, double tolerance) {
  require_modes(theta, gamma);
  require_shape(plan.v, theta.rows(), gamma.rows(), "plan");
  require_positive(plan.p, "p");
  WeightOptimalityReport out;
  out.row_costs = plan.v.cwiseProduct(mode_costs(theta, gamma)).rowwise().sum();
  out.spread = out.row_costs.maxCoeff() - out.row_costs.minCoeff();
  out.pass = out.spread <= tolerance;
  return out;
}

// --- constraint systems ------------------------------------------------------

std::string to_string(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::row_sum: return "row_sum";
    case ConstraintKind::barycenter: return "barycenter";
    case ConstraintKind::optimality: return "optimality";
    case ConstraintKind::boundary: return "boundary";
  }
  return "?";
}

ConstraintKind constraint_from_string(const std::string& name) {
  for (auto k : {ConstraintKind::row_sum, ConstraintKind::barycenter, ConstraintKind::optimality,
                 ConstraintKind::boundary})
    if (to_string(k) == name) return k;
  throw ValidationError("unknown constraint '" + name +
                        "' (expected row_sum, barycenter, optimality or boundary)");
}

namespace {

bool selected(const std::vector<ConstraintKind>& set, ConstraintKind k) {
  return std::find(set.begin(), set.end(), k) != set.end();
}

}  // namespace

ConstraintSystem dof_analysis(const SupportPattern& support, const Matrix& gamma, const Vector& p,
                              const Matrix& theta, const std::vector<ConstraintKind>& constraints,
                              const Vector& q) {
  require_modes(theta, gamma);
  const Eigen::Index I = theta.rows(), J = gamma.rows(), D = gamma.cols();
  if (support.rows() != I || support.cols() != J)
    throw ShapeError("support is " + std::to_string(support.rows()) + "x" +
                     std::to_string(support.cols()) + ", expected " + std::to_string(I) + "x" +
                     std::to_string(J));
  if (p.size() != I) throw ShapeError("p must have one entry per base mode");
  if (constraints.empty()) throw ValidationError("constraint set is empty");
  const bool boundary = selected(constraints, ConstraintKind::boundary);
  if (boundary && q.size() != J)
    throw ValidationError("boundary constraints need q with one entry per target mode");
  for (Eigen::Index i = 0; i < I; ++i)
    if (!support.row(i).any())
      throw ValidationError("support row " + std::to_string(i) + " is empty");
  for (Eigen::Index j = 0; j < J; ++j)
    if (!support.col(j).any())
      throw ValidationError("support column " + std::to_string(j) + " is empty");

  ConstraintSystem s;
  std::vector<std::vector<int>> var_of(I, std::vector<int>(J, -1));
  for (Eigen::Index i = 0; i < I; ++i)
    for (Eigen::Index j = 0; j < J; ++j)
      if (support(i, j)) {
        var_of[i][j] = static_cast<int>(s.cells.size());
        s.cells.emplace_back(static_cast<int>(i), static_cast<int>(j));
      }
  s.has_constant = selected(constraints, ConstraintKind::optimality);
  s.num_vars = static_cast<int>(s.cells.size()) + (s.has_constant ? 1 : 0);

  std::vector<RowVector> rows;
  std::vector<double> rhs;
  auto add = [&](ConstraintKind k, RowVector r, double b) {
    rows.push_back(std::move(r));
    rhs.push_back(b);
    s.row_kind.push_back(k);
  };
  const Matrix c = mode_costs(theta, gamma);
  for (ConstraintKind k : {ConstraintKind::row_sum, ConstraintKind::barycenter,
                           ConstraintKind::optimality, ConstraintKind::boundary}) {
    if (!selected(constraints, k)) continue;
    if (k == ConstraintKind::boundary) {
      for (Eigen::Index j = 0; j < J; ++j) {
        RowVector r = RowVector::Zero(s.num_vars);
        for (Eigen::Index i = 0; i < I; ++i)
          if (var_of[i][j] >= 0) r(var_of[i][j]) = p(i);
        add(k, r, q(j));
      }
      continue;
    }
    for (Eigen::Index i = 0; i < I; ++i) {
      if (k == ConstraintKind::row_sum) {
        RowVector r = RowVector::Zero(s.num_vars);
        for (Eigen::Index j = 0; j < J; ++j)
          if (var_of[i][j] >= 0) r(var_of[i][j]) = 1.0;
        add(k, r, 1.0);
      } else if (k == ConstraintKind::barycenter) {
        for (Eigen::Index d = 0; d < D; ++d) {
          RowVector r = RowVector::Zero(s.num_vars);
          for (Eigen::Index j = 0; j < J; ++j)
            if (var_of[i][j] >= 0) r(var_of[i][j]) = gamma(j, d);
          add(k, r, theta(i, d));
        }
      } else {
        RowVector r = RowVector::Zero(s.num_vars);
        for (Eigen::Index j = 0; j < J; ++j)
          if (var_of[i][j] >= 0) r(var_of[i][j]) = c(i, j);
        r(s.num_vars - 1) = -1.0;
        add(k, r, 0.0);
      }
    }
  }
  s.a.resize(static_cast<Eigen::Index>(rows.size()), s.num_vars);
  s.b.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    s.a.row(static_cast<Eigen::Index>(r)) = rows[r];
    s.b(static_cast<Eigen::Index>(r)) = rhs[r];
  }

  Eigen::BDCSVD<Matrix> svd(s.a);
  s.singular_values = svd.singularValues();
  const double top = s.singular_values.size() ? s.singular_values(0) : 0.0;
  s.rank = 0;
  for (Eigen::Index k = 0; k < s.singular_values.size(); ++k)
    if (s.singular_values(k) > kRankTolerance * top) ++s.rank;
  s.dof = s.num_vars - s.rank;
  s.counted_dof = static_cast<int>(J - I * D);
  s.generic_support = static_cast<Eigen::Index>(s.cells.size()) == I + J - 1;
  s.rank_deficient = s.rank < std::min<Eigen::Index>(s.a.rows(), s.num_vars);
  return s;
}

Reconstruction reconstruct_plan(const SupportPattern& support, const Matrix& gamma,
                                const Vector& p, const Vector& q, const Matrix& theta,
                                const std::vector<ConstraintKind>& constraints) {
  Reconstruction out;
  out.system = dof_analysis(support, gamma, p, theta, constraints, q);
  const ConstraintSystem& s = out.system;
  Eigen::JacobiSVD<Matrix> svd(s.a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  svd.setThreshold(kRankTolerance);
  const Vector x = svd.solve(s.b);
  out.residual = (s.a * x - s.b).norm();
  out.nullity = s.dof;
  out.consistent = out.residual <= 1e-6 * std::max(1.0, s.b.norm());

  const Eigen::Index I = theta.rows(), J = gamma.rows();
  ot::TransportPlan& plan = out.plan;
  plan.v = Matrix::Zero(I, J);
  for (std::size_t k = 0; k < s.cells.size(); ++k)
    plan.v(s.cells[k].first, s.cells[k].second) = x(static_cast<Eigen::Index>(k));
  plan.p = p;
  plan.q = plan.v.transpose() * p;
  plan.objective = (p.asDiagonal() * plan.v).cwiseProduct(mode_costs(theta, gamma)).sum();
  return out;
}

// --- I = 1 --------------------------------------------------------------------

double reduced_dual_objective(const Matrix& theta, const Matrix& gamma, const Vector& p,
                              const Vector& q, const Vector& z_head) {
  const DualCompletion dc = support_from_dual(theta, gamma, p, z_head);
  if (q.size() != gamma.rows()) throw ShapeError("q must have one entry per target mode");
  return z_head.sum() + q.dot(dc.tail);
}

IllPosedReport demonstrate_i1_illposed(const Matrix& theta1, const Matrix& gamma, const Vector& q,
                                       const std::vector<double>& grid) {
  if (theta1.rows() != 1) throw ShapeError("the I=1 check takes a single base mode");
  ot::require_simplex(q, "q");
  IllPosedReport out;
  out.coefficient = 1.0 - q.sum();
  out.grid = grid;
  if (out.grid.empty())
    for (int k = -10; k <= 10; ++k) out.grid.push_back(k);
  const Vector p = Vector::Ones(1);
  auto obj = [&](double z1) {
    return reduced_dual_objective(theta1, gamma, p, q, Vector::Constant(1, z1));
  };
  out.measured_slope = obj(1.0) - obj(0.0);
  for (double z : out.grid) out.objective.push_back(obj(z));
  const auto [lo, hi] = std::minmax_element(out.objective.begin(), out.objective.end());
  out.max_deviation = *hi - *lo;
  return out;
}

// --- pipeline -----------------------------------------------------------------

std::string to_string(PredictorKind k) {
  switch (k) {
    case PredictorKind::oracle: return "oracle";
    case PredictorKind::mlp: return "mlp";
    case PredictorKind::linear: return "linear";
  }
  return "?";
}

PredictorKind predictor_from_string(const std::string& name) {
  for (auto k : {PredictorKind::oracle, PredictorKind::mlp, PredictorKind::linear})
    if (to_string(k) == name) return k;
  throw ValidationError("unknown predictor '" + name + "' (expected oracle, mlp or linear)");
}

namespace {

enum Stream : std::uint64_t { kProjectTrain = 1, kProjectTest = 2, kFit = 3 };

struct Triple {
  Matrix theta;
  Vector p;
  Vector u;  // row potentials z_i / p_i, centered
};

Triple ground_truth(const Matrix& gamma, const Vector& q, const PipelineConfig& c,
                    std::uint64_t stream, std::size_t n) {
  Rng rng(derive_seed(c.seed, {stream, n}));
  const ProjectionResult pr =
      project_to_I_modes({gamma, q}, c.num_modes, rng, c.projection);
  Triple t{pr.measure.modes, pr.measure.weights, Vector()};
  t.u = pr.dual.head(c.num_modes).cwiseQuotient(t.p);
  t.u.array() -= t.u.mean();
  return t;
}

Vector centered_log(const Vector& w) {
  Vector l = w.unaryExpr([](double x) { return std::log(std::max(x, DBL_MIN)); });
  l.array() -= l.mean();
  return l;
}

Vector softmax(const Vector& l) {
  Vector e = (l.array() - l.maxCoeff()).exp();
  return e / e.sum();
}

// Standardized regression y -> target by least squares or a one-hidden-layer MLP.
class Regressor {
 public:
  Regressor(const Matrix& x, const Matrix& y, const PipelineConfig& c, std::uint64_t stream)
      : kind_(c.predictor) {
    x_mean_ = x.colwise().mean();
    y_mean_ = y.colwise().mean();
    x_scale_ = scale_of(x, x_mean_);
    y_scale_ = scale_of(y, y_mean_);
    const Matrix xs = standardize(x, x_mean_, x_scale_);
    const Matrix ys = standardize(y, y_mean_, y_scale_);
    if (kind_ == PredictorKind::linear) {
      Matrix a(xs.rows(), xs.cols() + 1);
      a << xs, Matrix::Ones(xs.rows(), 1);
      coef_ = a.completeOrthogonalDecomposition().solve(ys);
      return;
    }
    Rng rng(derive_seed(c.seed, {kFit, stream}));
    net_ = nn::make_mlp({static_cast<int>(x.cols()), c.hidden, static_cast<int>(y.cols())},
                        nn::Activation::tanh, 0.0, rng);
    nn::OptState opt;
    opt.config.lr = c.lr;
    for (int e = 0; e < c.epochs; ++e) {
      nn::Tape tape;
      const nn::MlpVars vars = nn::bind(tape, net_);
      const nn::Var out = nn::mlp_forward(net_, vars, tape.constant(xs), rng);
      tape.backward(nn::mean_sq_norm(nn::sub(out, tape.constant(ys))));
      nn::MlpGrads g = nn::read_grads(vars);
      std::vector<nn::ParamRef> refs;
      for (std::size_t l = 0; l < net_.num_layers(); ++l) {
        refs.push_back({"w" + std::to_string(l), &net_.weights[l], &g.weights[l]});
        refs.push_back({"b" + std::to_string(l), &net_.biases[l], &g.biases[l]});
      }
      nn::opt_step(refs, opt);
    }
  }

  Vector predict(const Vector& x) const {
    const RowVector xs = (x.transpose() - x_mean_).cwiseQuotient(x_scale_);
    RowVector ys;
    if (kind_ == PredictorKind::linear) {
      RowVector a(xs.size() + 1);
      a << xs, 1.0;
      ys = a * coef_;
    } else {
      Rng unused(0);
      ys = nn::mlp_forward(net_, xs.transpose(), unused).transpose();
    }
    return (ys.cwiseProduct(y_scale_) + y_mean_).transpose();
  }

 private:
  static RowVector scale_of(const Matrix& m, const RowVector& mean) {
    RowVector s = ((m.rowwise() - mean).array().square().colwise().mean()).sqrt();
    for (Eigen::Index k = 0; k < s.size(); ++k)
      if (s(k) < 1e-12) s(k) = 1.0;
    return s;
  }
  static Matrix standardize(const Matrix& m, const RowVector& mean, const RowVector& scale) {
    return (m.rowwise() - mean).array().rowwise() / scale.array();
  }

  PredictorKind kind_;
  RowVector x_mean_, x_scale_, y_mean_, y_scale_;
  Matrix coef_;
  nn::MlpParams net_;
};

// Reorders the modes of t to best match the reference mode locations.
void align(Triple& t, const Matrix& reference) {
  const std::vector<std::size_t> tau = ot::solve_assignment(ot::sq_euclidean_cost(t.theta, reference));
  Triple out{Matrix(t.theta.rows(), t.theta.cols()), Vector(t.p.size()), Vector(t.u.size())};
  for (std::size_t s = 0; s < tau.size(); ++s) {
    const auto d = static_cast<Eigen::Index>(tau[s]);
    const auto src = static_cast<Eigen::Index>(s);
    out.theta.row(d) = t.theta.row(src);
    out.p(d) = t.p(src);
    out.u(d) = t.u(src);
  }
  t = std::move(out);
}

Matrix stack_rows(const std::vector<Vector>& rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t k = 0; k < rows.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = rows[k];
  return m;
}

Vector flatten(const Matrix& m) {
  Vector v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i) v.segment(i * m.cols(), m.cols()) = m.row(i);
  return v;
}

Matrix unflatten(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) m.row(i) = v.segment(i * cols, cols);
  return m;
}

double total_variation(const Vector& a, const Vector& b) { return 0.5 * (a - b).cwiseAbs().sum(); }

}  // namespace

PipelineReport theory_pipeline(const Matrix& gamma, const std::vector<TheoryCondition>& train,
                               const std::vector<TheoryCondition>& test,
                               const PipelineConfig& config) {
  if (gamma.rows() == 0 || gamma.cols() == 0) throw ShapeError("gamma is empty");
  if (test.empty()) throw ValidationError("pipeline needs at least one test condition");
  const Eigen::Index I = config.num_modes, J = gamma.rows(), D = gamma.cols();
  if (I < 1 || I > J)
    throw ValidationError("pipeline needs 1 <= I <= J, got I=" + std::to_string(I));
  if (config.predictor != PredictorKind::oracle && train.size() < 2)
    throw ValidationError("learned predictors need at least two training conditions");
  for (const auto* set : {&train, &test})
    for (std::size_t n = 0; n < set->size(); ++n) {
      const TheoryCondition& cond = (*set)[n];
      if (cond.q.size() != J)
        throw ShapeError("condition " + std::to_string(n) + ": q has " +
                         std::to_string(cond.q.size()) + " entries, expected " + std::to_string(J));
      ot::require_simplex(cond.q, "condition q");
      if (cond.y.size() != test.front().y.size())
        throw ShapeError("condition " + std::to_string(n) + ": descriptor size differs");
    }

  // Training phase: project, take the dual head, fit the predictors.
  std::vector<Triple> truth(train.size());
  std::optional<Regressor> h_theta, h_p, h_u, h_q;
  if (config.predictor != PredictorKind::oracle) {
    parallel_for(train.size(), [&](std::size_t n) {
      truth[n] = I > 1 ? ground_truth(gamma, train[n].q, config, kProjectTrain, n) : Triple{};
    });
    std::vector<Vector> ys, thetas, ps, us, qs;
    for (std::size_t n = 0; n < train.size(); ++n) {
      ys.push_back(train[n].y);
      qs.push_back(centered_log(train[n].q));
      if (I == 1) continue;
      if (n > 0) align(truth[n], truth[0].theta);
      thetas.push_back(flatten(truth[n].theta));
      ps.push_back(centered_log(truth[n].p));
      us.push_back(truth[n].u);
    }
    const Matrix y = stack_rows(ys);
    h_q.emplace(y, stack_rows(qs), config, 0);
    if (I > 1) {
      h_theta.emplace(y, stack_rows(thetas), config, 1);
      h_p.emplace(y, stack_rows(ps), config, 2);
      h_u.emplace(y, stack_rows(us), config, 3);
    }
  }

  // Testing phase.
  PipelineReport report;
  report.conditions.resize(test.size());
  parallel_for(test.size(), [&](std::size_t n) {
    const TheoryCondition& cond = test[n];
    ConditionReport& r = report.conditions[n];
    const bool oracle = config.predictor == PredictorKind::oracle;
    const Vector direct = oracle ? cond.q : softmax(h_q->predict(cond.y));
    r.direct_tv = total_variation(direct, cond.q);
    if (I == 1) {
      r.direct = true;
      r.ok = true;
      r.q_hat = direct;
    } else {
      Triple t;
      if (oracle) {
        t = ground_truth(gamma, cond.q, config, kProjectTest, n);
      } else {
        t.theta = unflatten(h_theta->predict(cond.y), I, D);
        t.p = softmax(h_p->predict(cond.y));
        t.u = h_u->predict(cond.y);
      }
      const DualCompletion dc = support_from_dual(t.theta, gamma, t.p, t.p.cwiseProduct(t.u));
      r.max_min_disagree = dc.max_min_disagree;
      r.support_size = static_cast<int>(dc.pattern.count());
      bool covered = dc.consistent();
      for (Eigen::Index j = 0; j < J && covered; ++j) covered = dc.pattern.col(j).any();
      if (!covered) {
        r.failure = "dual head leaves base mode " + std::to_string(dc.uncovered_rows.front()) +
                    " without a tight constraint";
        r.q_hat = Vector::Constant(J, std::numeric_limits<double>::quiet_NaN());
        r.tv = std::numeric_limits<double>::quiet_NaN();
        r.mw2 = std::numeric_limits<double>::quiet_NaN();
        return;
      }
      const Reconstruction rec =
          reconstruct_plan(dc.pattern, gamma, t.p, Vector(), t.theta, config.constraints);
      r.nullity = rec.nullity;
      r.residual = rec.residual;
      r.q_hat = rec.plan.q;
      r.ok = rec.consistent;
      if (!rec.consistent) {
        std::ostringstream msg;
        msg << "constraint system inconsistent (residual " << rec.residual << ")";
        r.failure = msg.str();
      }
    }
    r.tv = total_variation(r.q_hat, cond.q);
    Vector clipped = r.q_hat.cwiseMax(0.0);
    if (clipped.sum() > 0.0) {
      clipped /= clipped.sum();
      r.mw2 = mixture_wasserstein({gamma, clipped}, {gamma, cond.q}).mw2;
    } else {
      r.mw2 = std::numeric_limits<double>::quiet_NaN();
    }
  });

  double tv_sum = 0.0, direct_sum = 0.0;
  int counted = 0;
  for (const ConditionReport& r : report.conditions) {
    direct_sum += r.direct_tv;
    if (!r.ok) ++report.failures;
    if (std::isnan(r.tv)) continue;
    tv_sum += r.tv;
    report.max_tv = std::max(report.max_tv, r.tv);
    ++counted;
  }
  report.mean_tv = counted ? tv_sum / counted : std::numeric_limits<double>::quiet_NaN();
  report.mean_direct_tv = direct_sum / static_cast<double>(test.size());
  return report;
}

namespace {

nlohmann::json finite_or_null(double x) {
  return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json to_json(const PipelineReport& report) {
  nlohmann::json conds = nlohmann::json::array();
  for (const ConditionReport& r : report.conditions) {
    nlohmann::json q = nlohmann::json::array();
    for (Eigen::Index j = 0; j < r.q_hat.size(); ++j) q.push_back(finite_or_null(r.q_hat(j)));
    conds.push_back({{"ok", r.ok},
                     {"failure", r.failure},
                     {"q_hat", q},
                     {"tv", finite_or_null(r.tv)},
                     {"mw2", finite_or_null(r.mw2)},
                     {"direct_tv", r.direct_tv},
                     {"direct", r.direct},
                     {"support_size", r.support_size},
                     {"nullity", r.nullity},
                     {"residual", r.residual},
                     {"max_min_disagree", r.max_min_disagree}});
  }
  return {{"conditions", conds},
          {"mean_tv", finite_or_null(report.mean_tv)},
          {"max_tv", report.max_tv},
          {"mean_direct_tv", report.mean_direct_tv},
          {"failures", report.failures}};
}

nlohmann::json to_json(const ConstraintSystem& s) {
  nlohmann::json kinds = nlohmann::json::array();
  for (ConstraintKind k : s.row_kind) kinds.push_back(to_string(k));
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& [i, j] : s.cells) cells.push_back({i, j});
  return {{"num_vars", s.num_vars},       {"num_constraints", s.a.rows()},
          {"rank", s.rank},               {"dof", s.dof},
          {"counted_dof", s.counted_dof}, {"generic_support", s.generic_support},
          {"rank_deficient", s.rank_deficient},
          {"has_constant", s.has_constant},
          {"row_kind", kinds},            {"cells", cells}};
}

}  // namespace mixflow::theory
