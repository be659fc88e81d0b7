#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "criteria.hpp"
#include "mixflow/common/rng.hpp"
#include "mixflow/ot/transport.hpp"
#include "mixflow/theory/theory.hpp"
#include "ot_oracle.hpp"
#include "theory_oracle.hpp"

namespace mixflow::acceptance {

namespace {

using namespace mixflow::theory;
using oracle::random_simplex;

constexpr std::uint64_t kSeed = 20240601;

int uniform_int(int lo, int hi, Rng& rng) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Vertex enumeration is exhaustive but combinatorial; past this many
// candidate bases the dense tableau LP serves as the reference.
bool enumeration_affordable(int I, int J) {
  const int n = I * J, k = I + J - 1;
  double combos = 1.0;
  for (int s = 0; s < k; ++s) combos = combos * (n - s) / (s + 1);
  return combos <= 2e5;
}

Eigen::Index max_row_support(const SupportPattern& s) {
  Eigen::Index m = 0;
  for (Eigen::Index i = 0; i < s.rows(); ++i) m = std::max<Eigen::Index>(m, s.row(i).count());
  return m;
}

}  // namespace

Outcome criterion_ot_exactness(const Context&) {
  constexpr double kTol = 1e-7;
  Rng rng(derive_seed(kSeed, {4}));
  double worst_obj = 0.0, worst_gap = 0.0, worst_violation = 0.0;
  int subset_pass = 0, support_ok = 0, enumerated = 0;
  for (int n = 0; n < 200; ++n) {
    const int I = uniform_int(1, 6, rng), J = uniform_int(1, 6, rng);
    const Matrix theta = standard_normal(I, 3, rng), gamma = standard_normal(J, 3, rng);
    const Vector p = random_simplex(I, rng), q = random_simplex(J, rng);
    const auto cost = ot::CostMatrix::between(theta, gamma, ot::CostMetric::sq_euclidean);
    const ot::TransportResult r = ot::solve_transport(cost, p, q);
    double ref;
    if (enumeration_affordable(I, J)) {
      ref = oracle::vertex_enumeration_min(cost.entries(), p, q);
      ++enumerated;
    } else {
      ref = oracle::tableau_transport_min(cost.entries(), p, q);
    }
    worst_obj = std::max(worst_obj, std::abs(r.plan.objective - ref));
    worst_gap = std::max(worst_gap, std::abs(r.plan.objective - ot::dual_objective(r.dual, q)));
    worst_violation = std::max(worst_violation, ot::dual_violation(cost, p, r.dual.z));
    if (check_subset_sum(p, q).holds) {
      ++subset_pass;
      if (r.plan.support_size() == I + J - 1) ++support_ok;
    }
  }
  Outcome o{4, worst_obj <= kTol && worst_gap <= kTol && worst_violation <= kTol && support_ok == subset_pass};
  o.detail = "200 instances (" + std::to_string(enumerated) + " by vertex enumeration, rest by tableau LP): " +
             "max |obj - ref| " + fmt(worst_obj) + " <= 1e-7, max duality gap " + fmt(worst_gap) +
             " <= 1e-7, max dual violation " + fmt(worst_violation) + " <= 1e-7, support I+J-1 on " +
             std::to_string(support_ok) + "/" + std::to_string(subset_pass) + " subset-sum instances";
  return o;
}

Outcome criterion_dual_round_trip(const Context&) {
  Rng rng(derive_seed(kSeed, {5}));
  int tried = 0, matched = 0, accepted = 0;
  while (accepted < 200) {
    ++tried;
    const int I = uniform_int(2, 6, rng), J = uniform_int(2, 6, rng);
    const Matrix theta = standard_normal(I, 3, rng), gamma = standard_normal(J, 3, rng);
    const Vector p = random_simplex(I, rng), q = random_simplex(J, rng);
    if (!check_subset_sum(p, q).holds) continue;
    ++accepted;
    const MwResult mw = mixture_wasserstein({theta, p}, {gamma, q});
    const DualCompletion dc = support_from_dual(theta, gamma, p, mw.dual.head(I));
    if (dc.consistent() && dc.pattern == mw.plan.support()) ++matched;
  }
  Outcome o{5, matched == 200};
  o.detail = "exact support recovered on " + std::to_string(matched) + "/200 subset-sum instances (" +
             std::to_string(tried) + " drawn)";
  return o;
}

Outcome criterion_projection(const Context&) {
  Rng rng(derive_seed(kSeed, {6}));
  double worst_gap = 0.0, worst_bary = 0.0, worst_spread = 0.0;
  int spread_ok = 0;
  for (int n = 0; n < 50; ++n) {
    const int J = uniform_int(3, 8, rng);
    const int I = uniform_int(2, std::min(4, J - 1), rng);
    const Matrix gamma = standard_normal(J, 2, rng);
    const Vector q = random_simplex(J, rng);
    const ProjectionResult pr = project_to_I_modes({gamma, q}, I, rng);
    const double ref = oracle::exhaustive_projection_min(gamma, q, I);
    worst_gap = std::max(worst_gap, std::abs(pr.mw2 - ref));
    worst_bary = std::max(worst_bary, verify_barycenter(pr.measure.modes, gamma, pr.plan).max_residual);
    const double spread = verify_weight_optimality(pr.measure.modes, gamma, pr.plan).spread;
    worst_spread = std::max(worst_spread, spread);
    if (spread <= 1e-6) ++spread_ok;
  }
  Outcome o{6, worst_gap <= 1e-7 && worst_bary <= 1e-7 && worst_spread <= 1e-6};
  o.detail = "50 instances J<=8: max |MW2 - exhaustive| " + fmt(worst_gap) + " <= 1e-7, max barycenter residual " +
             fmt(worst_bary) + " <= 1e-7, max weight-optimality spread " + fmt(worst_spread) +
             " <= 1e-6 (met on " + std::to_string(spread_ok) + "/50)";
  return o;
}

Outcome criterion_dof(const Context& ctx) {
  // One family (I = 3, D = 4) swept across J so that J - I*D is -2, 0, 1, 3.
  constexpr int I = 3, D = 4;
  const std::vector<int> Js{10, 12, 13, 15};
  Rng rng(derive_seed(kSeed, {7}));
  std::ofstream log(ctx.log_dir + "/dof_mismatches.jsonl");
  bool pass = true;
  std::string detail;
  int logged = 0;
  for (int J : Js) {
    const int counted = J - I * D;
    const bool identifiable_claim = I * D >= J;
    int generic = 0, dof_match = 0, recovered = 0, small_rows = 0;
    for (int n = 0; n < 100; ++n) {
      const Matrix gamma = standard_normal(J, D, rng);
      const Vector p = random_simplex(I, rng), q = random_simplex(J, rng);
      const BarycentricInstance bi = barycentric_fixed_point(gamma, p, q, standard_normal(I, D, rng));
      const SupportPattern s = bi.transport.plan.support();
      const ConstraintSystem sys =
          dof_analysis(s, gamma, p, bi.theta, {ConstraintKind::barycenter, ConstraintKind::optimality});
      if (sys.generic_support) ++generic;
      if (sys.dof == counted) {
        ++dof_match;
      } else {
        nlohmann::json row = to_json(sys);
        row.erase("cells");
        row.erase("row_kind");
        row["J"] = J;
        row["instance"] = n;
        row["expected_dof"] = counted;
        log << row.dump() << "\n";
        ++logged;
      }
      if (max_row_support(s) <= D + 1) ++small_rows;
      const Reconstruction rec =
          reconstruct_plan(s, gamma, p, q, bi.theta, {ConstraintKind::row_sum, ConstraintKind::barycenter});
      if (rec.determined() && (rec.plan.v - bi.transport.plan.v).cwiseAbs().maxCoeff() <= 1e-6) ++recovered;
    }
    if (identifiable_claim && recovered < 95) pass = false;
    detail += "[J-ID=" + std::to_string(counted) + ": dof=J-ID on " + std::to_string(dof_match) +
              "/100, generic " + std::to_string(generic) + "/100, recovered " + std::to_string(recovered) +
              "/100" + (identifiable_claim ? " (need >= 95)" : " (not required)") + ", rows <= D+1 cells " +
              std::to_string(small_rows) + "/100] ";
  }
  Outcome o{7, pass};
  o.detail = "I=3 D=4 " + detail + std::to_string(logged) + " dof mismatches logged to " + ctx.log_dir +
             "/dof_mismatches.jsonl";
  return o;
}

Outcome criterion_i1_illposed(const Context&) {
  Rng rng(derive_seed(kSeed, {8}));
  double worst = 0.0, worst_slope = 0.0;
  for (int n = 0; n < 100; ++n) {
    const int J = uniform_int(2, 8, rng), D = uniform_int(1, 4, rng);
    const IllPosedReport r =
        demonstrate_i1_illposed(standard_normal(1, D, rng), standard_normal(J, D, rng), random_simplex(J, rng));
    worst = std::max(worst, std::abs(r.coefficient));
    worst_slope = std::max(worst_slope, std::abs(r.measured_slope));
  }
  const Matrix theta = standard_normal(2, 3, rng), gamma = standard_normal(5, 3, rng);
  const Vector p = random_simplex(2, rng), q = random_simplex(5, rng);
  Vector z = Vector::Zero(2);
  const double f0 = reduced_dual_objective(theta, gamma, p, q, z);
  z(0) = 1.0;
  const double slope2 = reduced_dual_objective(theta, gamma, p, q, z) - f0;
  Outcome o{8, worst <= 1e-12 && std::abs(slope2) > 1e-6};
  o.detail = "I=1 over 100 instances: max |z1 coefficient| " + fmt(worst) + " <= 1e-12 (max measured slope " +
             fmt(worst_slope) + "); I=2 contrast: objective change for unit z1 step " + fmt(slope2) +
             " (need |.| > 1e-6)";
  return o;
}

Outcome criterion_theory_pipeline(const Context&) {
  constexpr int J = 12, D = 4, I = 3;
  Rng rng(derive_seed(kSeed, {9}));
  const Matrix gamma = standard_normal(J, D, rng);
  std::vector<TheoryCondition> test;
  for (int n = 0; n < 20; ++n) test.push_back({random_simplex(J, rng), Vector::Zero(1)});
  PipelineConfig cfg;
  cfg.num_modes = I;
  cfg.predictor = PredictorKind::oracle;
  cfg.seed = kSeed;
  const PipelineReport r = theory_pipeline(gamma, {}, test, cfg);
  int within = 0, determined = 0, max_nullity = 0;
  for (const auto& c : r.conditions) {
    if (c.ok && c.tv <= 1e-5) ++within;
    if (c.nullity == 0) ++determined;
    max_nullity = std::max(max_nullity, c.nullity);
  }
  Outcome o{9, within == 20};
  o.detail = "J=12 D=4 I=3, 20 conditions: TV <= 1e-5 on " + std::to_string(within) + "/20 (max TV " +
             fmt(r.max_tv) + ", mean " + fmt(r.mean_tv) + "); unique reconstruction on " +
             std::to_string(determined) + "/20, max nullity " + std::to_string(max_nullity) + ", failures " +
             std::to_string(r.failures);
  return o;
}

}  // namespace mixflow::acceptance
