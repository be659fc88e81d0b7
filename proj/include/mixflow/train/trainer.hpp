#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "mixflow/data/dataset.hpp"
#include "mixflow/flow/flow.hpp"
#include "mixflow/metrics/metrics.hpp"
#include "mixflow/mixture/gmm.hpp"
#include "mixflow/nn/optimizer.hpp"

namespace mixflow::train {

// ---- planner ------------------------------------------------------------------

struct TrainingPlan {
  int warmup_epochs = 0;
  int alternating_epochs = 0;
  int cooldown_epochs = 0;
  int flow_steps_per_base_step = 4;

  int total_epochs() const { return warmup_epochs + alternating_epochs + cooldown_epochs; }
  void validate() const;
};

// 20% warm-up, 60% alternating, 20% cool-down (rounded).
TrainingPlan default_plan(int total_epochs, int flow_steps_per_base_step = 4);

enum class ModeTrain { velocity_field, base_distribution };
std::string to_string(ModeTrain m);

struct PlannerDecision {
  ModeTrain mode_train = ModeTrain::velocity_field;
  bool flag_settoeval_H = false;
};

enum class Phase { warmup, alternating, cooldown };
Phase phase_of(const TrainingPlan& plan, int epoch);

PlannerDecision planner_next(const TrainingPlan& plan, int epoch, long long iteration);

// ---- configuration ------------------------------------------------------------

enum class ModelKind { mixflow, cfm };
std::string to_string(ModelKind k);
ModelKind model_from_string(const std::string& name);

struct RunConfig {
  ModelKind model = ModelKind::mixflow;
  std::uint64_t seed = 0;

  // schedule
  int epochs = 50;
  int warmup_epochs = -1;  // -1: derived from `epochs` by default_plan
  int alternating_epochs = -1;
  int cooldown_epochs = -1;
  int flow_steps_per_base_step = 4;
  int iterations_per_epoch = 0;  // 0: number of training conditions

  // optimization
  int batch_size = 128;
  double lr = 1e-3;
  double base_lr = -1.0;  // < 0: same as lr
  nn::OptimizerKind optimizer = nn::OptimizerKind::adam;
  double temperature_start = 1.0;
  double temperature_end = 0.1;
  bool per_sample_time = false;

  // velocity network
  std::vector<int> velocity_hidden = {64, 64};
  nn::Activation velocity_activation = nn::Activation::silu;
  double velocity_dropout = 0.0;

  // base
  int num_modes = 0;  // 0: number of training conditions
  mixture::ModeSource mode_source = mixture::ModeSource::free_parameters;
  std::vector<int> base_hidden = {64};
  nn::Activation base_activation = nn::Activation::relu;
  double base_dropout = 0.1;
  double sigma2 = 1e-2;
  double base_init_gain = 0.1;

  bool cfm_ot_pairing = false;

  flow::IntegratorConfig integrator;  // sampling

  // validation
  int val_samples = 1000;
  int val_every = 1;
  flow::IntegratorConfig val_integrator;
  Eigen::Index metric_cap = metrics::kDefaultMetricCap;

  std::string checkpoint_dir;

  TrainingPlan plan() const;
  // Every problem found, one per line; empty when valid.
  std::vector<std::string> problems() const;
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig config_from_file(const std::string& path);
// Sets a dotted key ("trainer.lr") inside a config document, parsing the
// value as JSON when possible and as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value);

// ---- model and state ------------------------------------------------------------

struct Model {
  ModelKind kind = ModelKind::mixflow;
  flow::VelocityField velocity;
  std::optional<mixture::BasePredictor> base;  // mixflow only

  // Base distribution for descriptor y (eval mode).
  mixture::GmmParams base_for(const Vector& y) const;
  Matrix sample_base(const Vector& y, Eigen::Index n, Rng& rng) const;
  Matrix generate(const Vector& y, Eigen::Index n, const flow::IntegratorConfig& cfg,
                  Rng& rng) const;
};

struct TrainState {
  RunConfig config;
  Model model;
  nn::OptState opt_velocity;
  nn::OptState opt_base;
  int epoch = 0;             // completed epochs
  long long iteration = 0;   // total iterations performed
};

TrainState init_state(const RunConfig& config, const data::Dataset& train);

// Gumbel temperature for a point in the schedule (geometric anneal over the
// alternating period).
double temperature_at(const RunConfig& c, int epoch, int iteration_in_epoch, int iterations);

struct IterationInfo {
  std::size_t condition = 0;
  ModeTrain mode = ModeTrain::velocity_field;
  double loss = 0.0;
};

// One training iteration: draws a training population and updates exactly one
// parameter group. All randomness derives from (seed, epoch, iteration).
IterationInfo train_iteration(TrainState& state, const PlannerDecision& decision,
                              const std::vector<const data::Population*>& train,
                              int iteration_in_epoch, int iterations_in_epoch);

nlohmann::json checkpoint_json(const TrainState& state);
TrainState checkpoint_from_json(const nlohmann::json& j);
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

// ---- fitting ------------------------------------------------------------------

struct LogRow {
  int epoch = 0;
  std::string condition_id;
  metrics::MetricReport report;
};

struct FitResult {
  TrainState best;
  TrainState last;
  int best_epoch = 0;
  double best_w2 = std::numeric_limits<double>::quiet_NaN();
  std::vector<LogRow> log;
  std::string abort_reason;  // nonempty when training stopped on a numerical failure
};

// Metrics of `model` on every population, averaged into a mean W2.
std::vector<metrics::MetricReport> evaluate(const Model& model,
                                            const std::vector<const data::Population*>& pops,
                                            int n_samples, const flow::IntegratorConfig& cfg,
                                            std::uint64_t seed, Eigen::Index cap);

FitResult fit(const RunConfig& config, const data::Dataset& train, const data::Dataset& val);
// Convenience: splits a dataset by its split labels.
FitResult fit(const RunConfig& config, const data::Dataset& ds);

std::string log_csv(const std::vector<LogRow>& log);
void write_text(const std::string& path, const std::string& text);

}  // namespace mixflow::train
