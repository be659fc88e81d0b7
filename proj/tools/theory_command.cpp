#include <algorithm>
#include <iostream>
#include <random>
#include <set>

#include "commands.hpp"
#include "mixflow/common/error.hpp"
#include "mixflow/common/json_io.hpp"
#include "mixflow/theory/theory.hpp"
#include "mixflow/train/trainer.hpp"

namespace mixflow::cli {

namespace {

using namespace mixflow::theory;

const std::vector<std::string> kChecks{"duality", "subset_sum", "support", "projection",
                                       "dof",     "illposed",   "pipeline"};

Vector dirichlet(Eigen::Index n, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) w(i) = e(rng);
  return w / w.sum();
}

nlohmann::json pattern_json(const SupportPattern& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    std::string r;
    for (Eigen::Index j = 0; j < s.cols(); ++j) r += s(i, j) ? '1' : '0';
    rows.push_back(r);
  }
  return rows;
}

nlohmann::json subset_json(const SubsetSumResult& r) {
  return {{"holds", r.holds},
          {"min_gap", std::isfinite(r.min_gap) ? nlohmann::json(r.min_gap) : nlohmann::json(nullptr)},
          {"p_mask", r.p_mask},
          {"q_mask", r.q_mask}};
}

const std::vector<std::vector<ConstraintKind>>& dof_sets() {
  static const std::vector<std::vector<ConstraintKind>> sets{
      {ConstraintKind::barycenter, ConstraintKind::optimality},
      {ConstraintKind::row_sum, ConstraintKind::barycenter},
      {ConstraintKind::row_sum, ConstraintKind::barycenter, ConstraintKind::optimality}};
  return sets;
}

nlohmann::json dof_table(const SupportPattern& s, const Matrix& gamma, const Vector& p,
                         const Matrix& theta) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& set : dof_sets()) {
    nlohmann::json names = nlohmann::json::array();
    for (ConstraintKind k : set) names.push_back(to_string(k));
    nlohmann::json row = to_json(dof_analysis(s, gamma, p, theta, set));
    row.erase("cells");
    row.erase("row_kind");
    row["constraint_set"] = names;
    table.push_back(row);
  }
  return table;
}

nlohmann::json projection_json(const ProjectionResult& pr, const Matrix& gamma) {
  const BarycenterReport b = verify_barycenter(pr.measure.modes, gamma, pr.plan);
  const WeightOptimalityReport w = verify_weight_optimality(pr.measure.modes, gamma, pr.plan);
  return {{"mw2", pr.mw2},
          {"theta", matrix_json(pr.measure.modes)},
          {"weights", vector_json(pr.measure.weights)},
          {"assignment", pr.assignment},
          {"barycenter_max_residual", b.max_residual},
          {"weight_optimality_row_costs", vector_json(w.row_costs)},
          {"weight_optimality_spread", w.spread},
          {"iterations", pr.trace.size()}};
}

nlohmann::json random_report(int I, int J, int D, std::uint64_t seed, const std::set<std::string>& checks,
                             const ProjectionOptions& popt) {
  Rng rng(seed);
  const Matrix theta = standard_normal(I, D, rng);
  const Matrix gamma = standard_normal(J, D, rng);
  const Vector p = dirichlet(I, rng), q = dirichlet(J, rng);
  nlohmann::json rep;
  rep["instance"] = {{"mode", "random"}, {"I", I},         {"J", J},
                     {"D", D},           {"seed", seed},   {"theta", matrix_json(theta)},
                     {"gamma", matrix_json(gamma)},        {"p", vector_json(p)},
                     {"q", vector_json(q)}};
  const MwResult mw = mixture_wasserstein({theta, p}, {gamma, q});
  if (checks.count("duality")) {
    const double dual = ot::dual_objective(mw.dual, q);
    rep["duality"] = {{"mw2", mw.mw2},
                      {"dual_objective", dual},
                      {"gap", std::abs(mw.mw2 - dual)},
                      {"support_size", mw.plan.support_size()},
                      {"generic_support_size", I + J - 1}};
  }
  if (checks.count("subset_sum")) rep["subset_sum"] = subset_json(check_subset_sum(p, q));
  if (checks.count("support")) {
    const DualCompletion dc = support_from_dual(theta, gamma, p, mw.dual.head(I));
    rep["support"] = {{"solver", pattern_json(mw.plan.support())},
                      {"from_dual", pattern_json(dc.pattern)},
                      {"equal", dc.pattern == mw.plan.support()},
                      {"uncovered_rows", dc.uncovered_rows},
                      {"max_min_disagree", dc.max_min_disagree}};
  }
  if (checks.count("projection")) {
    if (I > J) {
      rep["projection"] = {{"skipped", "I > J"}};
    } else {
      Rng prng(derive_seed(seed, {1}));
      rep["projection"] = projection_json(project_to_I_modes({gamma, q}, I, prng, popt), gamma);
    }
  }
  if (checks.count("dof")) {
    nlohmann::json d;
    d["solver_support"] = dof_table(mw.plan.support(), gamma, p, theta);
    const BarycentricInstance bi = barycentric_fixed_point(gamma, p, q, theta);
    const SupportPattern s = bi.transport.plan.support();
    const Reconstruction rec = reconstruct_plan(
        s, gamma, p, q, bi.theta, {ConstraintKind::row_sum, ConstraintKind::barycenter});
    Eigen::Index max_row = 0;
    for (Eigen::Index i = 0; i < s.rows(); ++i) max_row = std::max<Eigen::Index>(max_row, s.row(i).count());
    d["barycentric_reconstruction"] = {
        {"support_size", s.count()},
        {"max_row_support", max_row},
        {"nullity", rec.nullity},
        {"residual", rec.residual},
        {"max_abs_error", (rec.plan.v - bi.transport.plan.v).cwiseAbs().maxCoeff()}};
    rep["dof"] = d;
  }
  if (checks.count("illposed")) {
    const IllPosedReport r = demonstrate_i1_illposed(theta.topRows(1), gamma, q);
    nlohmann::json j{{"i1_coefficient", r.coefficient},
                     {"i1_measured_slope", r.measured_slope},
                     {"i1_grid_max_deviation", r.max_deviation}};
    if (I > 1) {
      Vector z = Vector::Zero(I);
      const double f0 = reduced_dual_objective(theta, gamma, p, q, z);
      z(0) = 1.0;
      j["z1_slope"] = reduced_dual_objective(theta, gamma, p, q, z) - f0;
    }
    rep["illposed"] = j;
  }
  return rep;
}

nlohmann::json file_report(const nlohmann::json& doc, std::uint64_t seed,
                           const std::set<std::string>& checks, const ProjectionOptions& popt) {
  for (const char* key : {"gamma", "q_list", "I"})
    if (!doc.contains(key)) throw ValidationError(std::string("instance is missing '") + key + "'");
  const Matrix gamma = matrix_from_json(doc["gamma"], "gamma");
  const int I = doc["I"].get<int>();
  std::vector<TheoryCondition> conds;
  for (std::size_t n = 0; n < doc["q_list"].size(); ++n) {
    TheoryCondition c;
    c.q = vector_from_json(doc["q_list"][n], "q_list[" + std::to_string(n) + "]");
    c.y = doc.contains("y_list") ? vector_from_json(doc["y_list"][n], "y_list[" + std::to_string(n) + "]")
                                 : Vector::Zero(1);
    conds.push_back(c);
  }
  if (conds.empty()) throw ValidationError("instance has an empty q_list");
  if (doc.contains("y_list") && doc["y_list"].size() != conds.size())
    throw ValidationError("q_list and y_list differ in length");
  if (checks.count("subset_sum") && (I > kSubsetSumCap || gamma.rows() > kSubsetSumCap))
    throw ValidationError("subset-sum checks are capped at I, J <= " + std::to_string(kSubsetSumCap));

  nlohmann::json rep;
  rep["instance"] = {{"mode", "file"},
                     {"I", I},
                     {"J", gamma.rows()},
                     {"D", gamma.cols()},
                     {"conditions", conds.size()},
                     {"seed", seed}};
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t n = 0; n < conds.size(); ++n) {
    nlohmann::json c;
    Rng rng(derive_seed(seed, {n}));
    const ProjectionResult pr = project_to_I_modes({gamma, conds[n].q}, I, rng, popt);
    if (checks.count("projection")) c["projection"] = projection_json(pr, gamma);
    if (checks.count("duality"))
      c["duality"] = {{"mw2", pr.mw2},
                      {"dual_objective", ot::dual_objective(pr.dual, conds[n].q)},
                      {"gap", std::abs(pr.mw2 - ot::dual_objective(pr.dual, conds[n].q))},
                      {"support_size", pr.plan.support_size()}};
    if (checks.count("subset_sum"))
      c["subset_sum"] = subset_json(check_subset_sum(pr.measure.weights, conds[n].q));
    if (checks.count("support")) {
      const DualCompletion dc =
          support_from_dual(pr.measure.modes, gamma, pr.measure.weights, pr.dual.head(I));
      c["support"] = {{"from_dual", pattern_json(dc.pattern)},
                      {"equal_to_plan", dc.pattern == pr.plan.support()},
                      {"uncovered_rows", dc.uncovered_rows},
                      {"max_min_disagree", dc.max_min_disagree}};
    }
    if (checks.count("dof"))
      c["dof"] = dof_table(pr.plan.support(), gamma, pr.measure.weights, pr.measure.modes);
    if (checks.count("illposed")) {
      const IllPosedReport r = demonstrate_i1_illposed(pr.measure.modes.topRows(1), gamma, conds[n].q);
      c["illposed"] = {{"i1_coefficient", r.coefficient}, {"i1_grid_max_deviation", r.max_deviation}};
    }
    per.push_back(c);
  }
  rep["conditions"] = per;

  if (checks.count("pipeline")) {
    PipelineConfig pc;
    pc.num_modes = I;
    pc.seed = seed;
    pc.projection = popt;
    pc.predictor = predictor_from_string(doc.value("predictor", std::string("oracle")));
    if (doc.contains("constraints")) {
      pc.constraints.clear();
      for (const auto& k : doc["constraints"]) pc.constraints.push_back(constraint_from_string(k));
    }
    std::vector<TheoryCondition> train, test;
    if (pc.predictor == PredictorKind::oracle) {
      test = conds;
    } else {
      for (std::size_t n = 0; n < conds.size(); ++n) (n % 2 == 0 ? train : test).push_back(conds[n]);
      if (test.empty()) throw ValidationError("learned predictors need at least two conditions");
    }
    nlohmann::json pj = to_json(theory_pipeline(gamma, train, test, pc));
    pj["predictor"] = to_string(pc.predictor);
    pj["split"] = pc.predictor == PredictorKind::oracle ? "all conditions tested"
                                                         : "even indices train, odd indices test";
    rep["pipeline"] = pj;
  }
  return rep;
}

}  // namespace

void add_theory(CLI::App& app) {
  auto* cmd = app.add_subcommand("theory", "Check the mixture-Wasserstein statements on an instance");
  struct Opts {
    std::string instance, out;
    bool random = false;
    int I = 2, J = 5, D = 3, restarts = 8;
    std::vector<std::string> checks{"all"};
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  auto* inst = cmd->add_option("--instance", o->instance, "Instance JSON {gamma, q_list, y_list, I}");
  auto* rnd = cmd->add_flag("--random", o->random, "Draw a random instance");
  inst->excludes(rnd);
  cmd->add_option("--I", o->I, "Base modes (random mode)")->capture_default_str();
  cmd->add_option("--J", o->J, "Target modes (random mode)")->capture_default_str();
  cmd->add_option("--D", o->D, "Dimension (random mode)")->capture_default_str();
  cmd->add_option("--restarts", o->restarts, "Projection restarts")->capture_default_str();
  cmd->add_option("--checks", o->checks,
                  "all, or any of duality subset_sum support projection dof illposed pipeline")
      ->take_all();
  auto* seed = cmd->add_option("--seed", o->seed, "Random seed");
  cmd->add_option("--out", o->out, "Report JSON (stdout when omitted)");
  cmd->add_option("--config", "JSON file with any of the above keys");
  cmd->callback([o, seed]() {
    if (o->instance.empty() && !o->random)
      throw ValidationError("theory needs --instance <json> or --random");
    std::set<std::string> checks;
    for (const std::string& c : o->checks) {
      if (c == "all") {
        checks.insert(kChecks.begin(), kChecks.end());
      } else if (std::find(kChecks.begin(), kChecks.end(), c) != kChecks.end()) {
        checks.insert(c);
      } else {
        throw ValidationError("--checks: unknown check '" + c + "'");
      }
    }
    ProjectionOptions popt;
    popt.restarts = o->restarts;
    const std::uint64_t s = resolve_seed(seed, o->seed);
    nlohmann::json rep;
    if (o->random) {
      if (o->I < 1 || o->J < 1 || o->D < 1)
        throw ValidationError("--I, --J and --D must be positive");
      if (checks.count("subset_sum") && (o->I > kSubsetSumCap || o->J > kSubsetSumCap))
        throw ValidationError("--I and --J are capped at " + std::to_string(kSubsetSumCap) +
                              " for the exhaustive subset-sum check");
      checks.erase("pipeline");
      rep = random_report(o->I, o->J, o->D, s, checks, popt);
    } else {
      try {
        rep = file_report(read_json_file(o->instance), s, checks, popt);
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("instance '" + o->instance + "' is malformed: " + e.what());
      }
    }
    const std::string text = rep.dump(2) + "\n";
    if (o->out.empty())
      std::cout << text;
    else
      train::write_text(o->out, text);
  });
}

}  // namespace mixflow::cli
