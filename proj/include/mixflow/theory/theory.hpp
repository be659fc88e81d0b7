#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mixflow/common/rng.hpp"
#include "mixflow/common/types.hpp"
#include "mixflow/ot/transport.hpp"

namespace mixflow::theory {

using SupportPattern = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Mode locations and weights of a Gaussian mixture. The shared variance does
// not enter the mixture Wasserstein distance and is not stored.
struct GmmMeasure {
  Matrix modes;    // K x D
  Vector weights;  // simplex, length K

  Eigen::Index size() const { return modes.rows(); }
  Eigen::Index dim() const { return modes.cols(); }
  void validate(const char* what = "measure") const;
};

struct MwResult {
  double mw2 = 0.0;
  ot::TransportPlan plan;
  ot::DualSolution dual;
};

// Discrete OT between the modes with squared Euclidean mode costs.
MwResult mixture_wasserstein(const GmmMeasure& a, const GmmMeasure& b);

// --- subset sums -------------------------------------------------------------

constexpr int kSubsetSumCap = 20;

struct SubsetSumResult {
  bool holds = true;
  // First violating pair as bit masks over the indices of p and q.
  std::uint32_t p_mask = 0;
  std::uint32_t q_mask = 0;
  // Smallest |sum_A p - sum_B q| over proper nonempty subsets.
  double min_gap = 0.0;
};

// Exhaustive over proper nonempty subsets; sizes above kSubsetSumCap rejected.
SubsetSumResult check_subset_sum(const Vector& p, const Vector& q, double tolerance = 1e-9);

// --- dual completion ---------------------------------------------------------

struct DualCompletion {
  SupportPattern pattern;
  // Completed tail z_{I+j} = min_i [c_ij - z_i / p_i].
  Vector tail;
  // The same expression with max over i.
  Vector tail_max;
  bool max_min_disagree = false;
  // Rows with no tight constraint; nonempty means z_head is not optimal.
  std::vector<int> uncovered_rows;
  bool consistent() const { return uncovered_rows.empty(); }
};

// Tightness is judged within tight_tol * max(1, max c_ij). Requires p > 0.
DualCompletion support_from_dual(const Matrix& theta, const Matrix& gamma, const Vector& p,
                                 const Vector& z_head, double tight_tol = 1e-7);

// --- projection --------------------------------------------------------------

struct ProjectionOptions {
  int restarts = 8;
  int max_iterations = 500;
};

struct ProjectionResult {
  GmmMeasure measure;
  // Hard assignment plan (each target mode sent to one base mode).
  ot::TransportPlan plan;
  ot::DualSolution dual;
  std::vector<int> assignment;
  double mw2 = 0.0;
  // MW2 after each alternating step of the winning restart.
  std::vector<double> trace;
  int restart = 0;
};

// Alternating minimization of MW2 over I-mode measures: nearest-mode
// assignment, weighted barycenters, absorbed mass as weights, then
// single-mode exchange refinement. Best of `restarts` seeded starts.
// Requires strictly positive target weights.
ProjectionResult project_to_I_modes(const GmmMeasure& target, int num_modes, Rng& rng,
                                    const ProjectionOptions& options = {});

// Lloyd iteration with the weights p held fixed: theta <- V(theta) gamma until
// the optimal plan stops changing. The result satisfies the barycenter
// condition exactly for its own plan.
struct BarycentricInstance {
  Matrix theta;
  ot::TransportResult transport;
  int iterations = 0;
};
BarycentricInstance barycentric_fixed_point(const Matrix& gamma, const Vector& p, const Vector& q,
                                            const Matrix& theta0, int max_iterations = 500);

// --- optimality checks -------------------------------------------------------

struct BarycenterReport {
  Vector residuals;
  double max_residual = 0.0;
  bool pass = false;
};

BarycenterReport verify_barycenter(const Matrix& theta, const Matrix& gamma,
                                   const ot::TransportPlan& plan, double tolerance = 1e-7);

struct WeightOptimalityReport {
  Vector row_costs;  // r_i = sum_j v_ij |theta_i - gamma_j|^2
  double spread = 0.0;
  bool pass = false;
};

WeightOptimalityReport verify_weight_optimality(const Matrix& theta, const Matrix& gamma,
                                                const ot::TransportPlan& plan,
                                                double tolerance = 1e-6);

// --- constraint systems ------------------------------------------------------

enum class ConstraintKind { row_sum, barycenter, optimality, boundary };

std::string to_string(ConstraintKind k);
ConstraintKind constraint_from_string(const std::string& name);

constexpr double kRankTolerance = 1e-8;

struct ConstraintSystem {
  Matrix a;
  Vector b;
  std::vector<ConstraintKind> row_kind;
  // Plan cells carried as unknowns, row-major over the support.
  std::vector<std::pair<int, int>> cells;
  // Whether the last unknown is the optimality constant.
  bool has_constant = false;
  int num_vars = 0;
  int rank = 0;
  int dof = 0;
  // J - I*D.
  int counted_dof = 0;
  bool generic_support = false;
  // Rank below min(rows, vars).
  bool rank_deficient = false;
  Vector singular_values;
};

// Assembles the selected linear constraints over the support cells (plus the
// optimality constant when selected). theta supplies barycenter right-hand
// sides and optimality coefficients; q is needed only for `boundary`.
ConstraintSystem dof_analysis(const SupportPattern& support, const Matrix& gamma,
                              const Vector& p, const Matrix& theta,
                              const std::vector<ConstraintKind>& constraints,
                              const Vector& q = Vector());

struct Reconstruction {
  ConstraintSystem system;
  // Minimum-norm least-squares plan restricted to the support.
  ot::TransportPlan plan;
  double residual = 0.0;
  int nullity = 0;
  bool determined() const { return nullity == 0; }
  bool consistent = true;
};

Reconstruction reconstruct_plan(const SupportPattern& support, const Matrix& gamma,
                                const Vector& p, const Vector& q, const Matrix& theta,
                                const std::vector<ConstraintKind>& constraints);

// --- I = 1 --------------------------------------------------------------------

// sum_i z_i + sum_j q_j tail_j with the tail completed by the min rule.
double reduced_dual_objective(const Matrix& theta, const Matrix& gamma, const Vector& p,
                              const Vector& q, const Vector& z_head);

struct IllPosedReport {
  // Coefficient of z_1 after substituting the tail: 1 - sum_j q_j.
  double coefficient = 0.0;
  // Finite-difference slope of the reduced objective in z_1.
  double measured_slope = 0.0;
  std::vector<double> grid;
  std::vector<double> objective;
  double max_deviation = 0.0;
};

IllPosedReport demonstrate_i1_illposed(const Matrix& theta1, const Matrix& gamma, const Vector& q,
                                       const std::vector<double>& grid = {});

// --- train/test pipeline ------------------------------------------------------

enum class PredictorKind { oracle, mlp, linear };

std::string to_string(PredictorKind k);
PredictorKind predictor_from_string(const std::string& name);

struct TheoryCondition {
  Vector q;
  Vector y;
};

struct PipelineConfig {
  int num_modes = 2;
  PredictorKind predictor = PredictorKind::oracle;
  std::vector<ConstraintKind> constraints{ConstraintKind::row_sum, ConstraintKind::barycenter};
  ProjectionOptions projection;
  int hidden = 64;
  int epochs = 3000;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

struct ConditionReport {
  bool ok = false;
  std::string failure;
  Vector q_hat;
  double tv = 0.0;
  double mw2 = 0.0;
  // Error of predicting q directly from the descriptor.
  double direct_tv = 0.0;
  // I = 1: the plan is q itself, so q_hat comes from the direct predictor.
  bool direct = false;
  int support_size = 0;
  int nullity = 0;
  double residual = 0.0;
  bool max_min_disagree = false;
};

struct PipelineReport {
  std::vector<ConditionReport> conditions;
  double mean_tv = 0.0;
  double max_tv = 0.0;
  double mean_direct_tv = 0.0;
  int failures = 0;
};

PipelineReport theory_pipeline(const Matrix& gamma, const std::vector<TheoryCondition>& train,
                               const std::vector<TheoryCondition>& test,
                               const PipelineConfig& config);

nlohmann::json to_json(const PipelineReport& report);
nlohmann::json to_json(const ConstraintSystem& system);

}  // namespace mixflow::theory
