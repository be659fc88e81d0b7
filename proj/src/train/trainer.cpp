#include "mixflow/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/common/parallel.hpp"

namespace mixflow::train {

// ---- planner ------------------------------------------------------------------

void TrainingPlan::validate() const {
  if (warmup_epochs < 0 || alternating_epochs < 0 || cooldown_epochs < 0)
    throw ValidationError("training plan: period lengths must be >= 0");
  if (flow_steps_per_base_step < 0)
    throw ValidationError("training plan: flow_steps_per_base_step must be >= 0");
}

TrainingPlan default_plan(int total_epochs, int flow_steps_per_base_step) {
  TrainingPlan p;
  p.flow_steps_per_base_step = flow_steps_per_base_step;
  p.warmup_epochs = static_cast<int>(std::lround(0.2 * total_epochs));
  p.cooldown_epochs = static_cast<int>(std::lround(0.2 * total_epochs));
  p.alternating_epochs = std::max(0, total_epochs - p.warmup_epochs - p.cooldown_epochs);
  return p;
}

std::string to_string(ModeTrain m) {
  return m == ModeTrain::velocity_field ? "velocity_field" : "base_distribution";
}

Phase phase_of(const TrainingPlan& plan, int epoch) {
  if (epoch < 0 || epoch >= plan.total_epochs())
    throw ValidationError("planner: epoch " + std::to_string(epoch) + " is outside the " +
                          std::to_string(plan.total_epochs()) + "-epoch schedule");
  if (epoch < plan.warmup_epochs) return Phase::warmup;
  if (epoch < plan.warmup_epochs + plan.alternating_epochs) return Phase::alternating;
  return Phase::cooldown;
}

PlannerDecision planner_next(const TrainingPlan& plan, int epoch, long long iteration) {
  plan.validate();
  if (iteration < 0) throw ValidationError("planner: iteration must be >= 0");
  switch (phase_of(plan, epoch)) {
    case Phase::warmup:
      return {ModeTrain::velocity_field, false};
    case Phase::alternating: {
      const long long period = plan.flow_steps_per_base_step + 1;
      const bool base = iteration % period == plan.flow_steps_per_base_step;
      return {base ? ModeTrain::base_distribution : ModeTrain::velocity_field, false};
    }
    case Phase::cooldown:
      return {ModeTrain::velocity_field, true};
  }
  return {};
}

// ---- model --------------------------------------------------------------------

mixture::GmmParams Model::base_for(const Vector& y) const {
  if (kind == ModelKind::cfm) {
    if (y.size() != velocity.descriptor_size)
      throw ShapeError("descriptor has length " + std::to_string(y.size()) + ", model expects " +
                       std::to_string(velocity.descriptor_size));
    return mixture::standard_normal_base(velocity.dim);
  }
  Rng unused(0);
  return mixture::predict_base(*base, y, false, unused);
}

Matrix Model::sample_base(const Vector& y, Eigen::Index n, Rng& rng) const {
  return mixture::sample_hard(base_for(y), n, rng);
}

Matrix Model::generate(const Vector& y, Eigen::Index n, const flow::IntegratorConfig& cfg,
                       Rng& rng) const {
  return flow::integrate(velocity, sample_base(y, n, rng), y, cfg);
}

// ---- state --------------------------------------------------------------------

namespace {

enum Stream : std::uint64_t {
  kInit = 1,
  kPopulation = 2,
  kBatch = 3,
  kWork = 4,
  kValidation = 5,
};

nn::OptState make_opt(const RunConfig& c, double lr) {
  nn::OptState s;
  s.config.kind = c.optimizer;
  s.config.lr = lr;
  return s;
}

}  // namespace

TrainState init_state(const RunConfig& config, const data::Dataset& train) {
  config.validate();
  const auto pops = train.of_split(data::Split::train);
  if (pops.empty()) throw ValidationError("training set has no train-split populations");
  TrainState st;
  st.config = config;
  st.model.kind = config.model;
  Rng rng(derive_seed(config.seed, {kInit}));
  st.model.velocity =
      flow::make_velocity_field(train.dim, train.descriptor_size, config.velocity_hidden,
                                config.velocity_activation, config.velocity_dropout, rng);
  if (config.model == ModelKind::mixflow) {
    mixture::BaseConfig bc;
    bc.num_modes = config.num_modes > 0 ? config.num_modes : static_cast<int>(pops.size());
    bc.dim = train.dim;
    bc.descriptor_size = train.descriptor_size;
    bc.hidden = config.base_hidden;
    bc.activation = config.base_activation;
    bc.dropout_rate = config.base_dropout;
    bc.sigma2 = config.sigma2;
    bc.mode_source = config.mode_source;
    bc.init_gain = config.base_init_gain;
    mixture::BasePredictor bp = mixture::make_base_predictor(bc, rng);
    if (bp.mode_source == mixture::ModeSource::free_parameters) {
      // one sample of the assigned condition per mode
      for (int i = 0; i < bp.num_modes; ++i) {
        const data::Population& p = *pops[static_cast<std::size_t>(i) % pops.size()];
        std::uniform_int_distribution<Eigen::Index> pick(0, p.samples.rows() - 1);
        bp.free_theta.row(i) = p.samples.row(pick(rng));
      }
    }
    st.model.base = std::move(bp);
  }
  st.opt_velocity = make_opt(config, config.lr);
  st.opt_base = make_opt(config, config.base_lr > 0.0 ? config.base_lr : config.lr);
  return st;
}

double temperature_at(const RunConfig& c, int epoch, int iteration_in_epoch, int iterations) {
  const TrainingPlan plan = c.plan();
  if (plan.alternating_epochs == 0) return c.temperature_end;
  double frac = (epoch - plan.warmup_epochs +
                 static_cast<double>(iteration_in_epoch) / std::max(1, iterations)) /
                plan.alternating_epochs;
  frac = std::clamp(frac, 0.0, 1.0);
  return c.temperature_start * std::pow(c.temperature_end / c.temperature_start, frac);
}

namespace {

Matrix draw_batch(const data::Population& pop, int batch, Rng& rng) {
  const Eigen::Index n = pop.samples.rows();
  Matrix out(batch, pop.samples.cols());
  if (n >= batch) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int k = 0; k < batch; ++k) {
      std::uniform_int_distribution<Eigen::Index> pick(k, n - 1);
      std::swap(idx[k], idx[pick(rng)]);
      out.row(k) = pop.samples.row(idx[k]);
    }
  } else {
    std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
    for (int k = 0; k < batch; ++k) out.row(k) = pop.samples.row(pick(rng));
  }
  return out;
}

std::vector<nn::ParamRef> mlp_refs(const std::string& prefix, nn::MlpParams& p,
                                   const nn::MlpGrads& g) {
  std::vector<nn::ParamRef> refs;
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    refs.push_back({prefix + ".w" + std::to_string(l), &p.weights[l], &g.weights[l]});
    refs.push_back({prefix + ".b" + std::to_string(l), &p.biases[l], &g.biases[l]});
  }
  return refs;
}

void require_finite_loss(double loss, const char* what) {
  if (!std::isfinite(loss)) throw NumericalError(std::string(what) + " loss is not finite");
}

}  // namespace

IterationInfo train_iteration(TrainState& state, const PlannerDecision& decision,
                              const std::vector<const data::Population*>& train,
                              int iteration_in_epoch, int iterations_in_epoch) {
  if (train.empty()) throw ValidationError("train_iteration: no training populations");
  const RunConfig& c = state.config;
  const std::uint64_t e = static_cast<std::uint64_t>(state.epoch);
  const std::uint64_t it = static_cast<std::uint64_t>(iteration_in_epoch);
  IterationInfo info;
  info.mode = decision.mode_train;

  Rng pop_rng(derive_seed(c.seed, {kPopulation, e, it}));
  std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
  info.condition = pick(pop_rng);
  const data::Population& pop = *train[info.condition];
  Rng batch_rng(derive_seed(c.seed, {kBatch, e, it}));
  const Matrix x1 = draw_batch(pop, c.batch_size, batch_rng);
  const Vector& y = pop.descriptor;
  Rng rng(derive_seed(c.seed, {kWork, e, it}));

  switch (decision.mode_train) {
    case ModeTrain::velocity_field: {
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      Vector t(c.per_sample_time ? c.batch_size : 1);
      for (Eigen::Index k = 0; k < t.size(); ++k) t(k) = unit(rng);
      flow::VelocityLoss loss;
      if (state.model.kind == ModelKind::mixflow) {
        const mixture::GmmParams g =
            mixture::predict_base(*state.model.base, y, !decision.flag_settoeval_H, rng);
        const Matrix x0 = mixture::sample_hard(g, c.batch_size, rng);
        const ot::Pairing tau = ot::assignment_pairing(x0, x1);
        loss = flow::loss_ot(state.model.velocity, x0, x1, tau, t, y, rng);
      } else {
        loss = flow::loss_cfm_baseline(state.model.velocity, x1, t, y, c.cfm_ot_pairing, rng);
      }
      require_finite_loss(loss.value, "flow");
      nn::opt_step(mlp_refs("velocity", state.model.velocity.net, loss.grads), state.opt_velocity);
      info.loss = loss.value;
      break;
    }
    case ModeTrain::base_distribution: {
      if (!state.model.base)
        throw ValidationError("train_iteration: the cfm baseline has no base parameters");
      mixture::BasePredictor& bp = *state.model.base;
      const double temp = temperature_at(c, state.epoch, iteration_in_epoch, iterations_in_epoch);
      const flow::GeoLoss loss = flow::loss_geo(bp, x1, y, temp, !decision.flag_settoeval_H, rng);
      require_finite_loss(loss.value, "geodesic");
      std::vector<nn::ParamRef> refs;
      if (bp.mode_source == mixture::ModeSource::predicted) {
        refs = mlp_refs("base.mode", bp.mode_head, loss.grads.mode_head);
      } else {
        refs.push_back({"base.theta", &bp.free_theta, &loss.grads.free_theta});
      }
      for (auto& r : mlp_refs("base.weight", bp.weight_head, loss.grads.weight_head))
        refs.push_back(r);
      nn::opt_step(refs, state.opt_base);
      info.loss = loss.value;
      break;
    }
    default:
      throw ValidationError("train_iteration: unknown training mode");
  }
  ++state.iteration;
  return info;
}

// ---- checkpoints ----------------------------------------------------------------

nlohmann::json checkpoint_json(const TrainState& s) {
  nlohmann::json j;
  j["config"] = to_json(s.config);
  j["velocity"] = flow::to_json(s.model.velocity);
  j["base"] = s.model.base ? mixture::to_json(*s.model.base)
                           : mixture::to_json(mixture::standard_normal_base(s.model.velocity.dim));
  j["opt_state"] = {{"velocity", nn::to_json(s.opt_velocity)}, {"base", nn::to_json(s.opt_base)}};
  j["epoch"] = s.epoch;
  // every random stream is a pure function of (seed, epoch, iteration)
  j["rng_state"] = {{"seed", s.config.seed}, {"epoch", s.epoch}, {"iteration", s.iteration}};
  return j;
}

TrainState checkpoint_from_json(const nlohmann::json& j) {
  try {
    TrainState s;
    s.config = config_from_json(j.at("config"));
    s.model.kind = s.config.model;
    s.model.velocity = flow::velocity_from_json(j.at("velocity"));
    if (s.model.kind == ModelKind::mixflow)
      s.model.base = mixture::base_predictor_from_json(j.at("base"));
    s.opt_velocity = nn::opt_state_from_json(j.at("opt_state").at("velocity"));
    s.opt_base = nn::opt_state_from_json(j.at("opt_state").at("base"));
    s.epoch = j.at("epoch").get<int>();
    s.iteration = j.at("rng_state").value("iteration", 0LL);
    if (s.model.base && s.model.base->descriptor_size() != s.model.velocity.descriptor_size)
      throw ValidationError("checkpoint: base and velocity disagree on the descriptor size");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("checkpoint: ") + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << text;
  if (!out) throw IoError("failed while writing '" + path + "'");
}

void save_checkpoint(const TrainState& state, const std::string& path) {
  write_text(path, checkpoint_json(state).dump() + "\n");
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

// ---- fitting --------------------------------------------------------------------

std::vector<metrics::MetricReport> evaluate(const Model& model,
                                            const std::vector<const data::Population*>& pops,
                                            int n_samples, const flow::IntegratorConfig& cfg,
                                            std::uint64_t seed, Eigen::Index cap) {
  std::vector<metrics::MetricReport> out(pops.size());
  parallel_for(pops.size(), [&](std::size_t k) {
    Rng rng(derive_seed(seed, {kValidation, k}));
    const Matrix gen = model.generate(pops[k]->descriptor, n_samples, cfg, rng);
    out[k] = metrics::report(gen, pops[k]->samples, derive_seed(seed, {kValidation, k, 1}), cap);
  });
  return out;
}

std::string log_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os << "epoch,condition_id,mmd,w1,w2,ed\n" << std::setprecision(17);
  for (const auto& r : log)
    os << r.epoch << ',' << r.condition_id << ',' << r.report.mmd << ',' << r.report.w1 << ','
       << r.report.w2 << ',' << r.report.ed << '\n';
  return os.str();
}

FitResult fit(const RunConfig& config, const data::Dataset& train, const data::Dataset& val) {
  config.validate();
  const auto train_pops = train.of_split(data::Split::train);
  const auto val_pops = val.of_split(data::Split::val);
  if (train_pops.empty()) throw ValidationError("fit: the training set is empty");
  if (!val_pops.empty() && (val.dim != train.dim || val.descriptor_size != train.descriptor_size))
    throw ShapeError("fit: train and validation sets differ in dimension or descriptor size");

  const std::string dir = config.checkpoint_dir;
  if (!dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory '" + dir + "'");
  }

  TrainState state = init_state(config, train);
  const TrainingPlan plan = config.plan();
  plan.validate();
  const int iters = config.iterations_per_epoch > 0 ? config.iterations_per_epoch
                                                    : static_cast<int>(train_pops.size());
  FitResult res;
  res.best = state;
  res.last = state;

  auto persist = [&]() {
    if (dir.empty()) return;
    save_checkpoint(res.best, dir + "/best.json");
    save_checkpoint(res.last, dir + "/last.json");
    write_text(dir + "/metrics.csv", log_csv(res.log));
  };

  for (int epoch = 0; epoch < plan.total_epochs(); ++epoch) {
    try {
      for (int it = 0; it < iters; ++it) {
        PlannerDecision d = planner_next(plan, epoch, it);
        if (config.model == ModelKind::cfm) d = {ModeTrain::velocity_field, false};
        train_iteration(state, d, train_pops, it, iters);
      }
    } catch (const NumericalError& e) {
      res.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      persist();
      return res;
    }
    state.epoch = epoch + 1;
    res.last = state;
    const bool validate_now = (epoch + 1) % config.val_every == 0 || epoch + 1 == plan.total_epochs();
    if (validate_now && !val_pops.empty()) {
      std::vector<metrics::MetricReport> reports;
      try {
        reports = evaluate(state.model, val_pops, config.val_samples, config.val_integrator,
                           config.seed, config.metric_cap);
      } catch (const NumericalError& e) {
        res.abort_reason = "validation after epoch " + std::to_string(epoch + 1) + ": " + e.what();
        persist();
        return res;
      }
      double mean_w2 = 0.0;
      for (std::size_t k = 0; k < reports.size(); ++k) {
        res.log.push_back({epoch + 1, val_pops[k]->condition_id, reports[k]});
        mean_w2 += reports[k].w2 / static_cast<double>(reports.size());
      }
      if (std::isnan(res.best_w2) || mean_w2 < res.best_w2) {
        res.best_w2 = mean_w2;
        res.best_epoch = epoch + 1;
        res.best = state;
      }
    } else if (val_pops.empty()) {
      res.best = state;
      res.best_epoch = epoch + 1;
    }
    persist();
  }
  persist();
  return res;
}

FitResult fit(const RunConfig& config, const data::Dataset& ds) { return fit(config, ds, ds); }

}  // namespace mixflow::train
