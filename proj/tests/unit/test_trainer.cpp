#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mixflow/common/error.hpp"
#include "mixflow/train/trainer.hpp"

using namespace mixflow;
using namespace mixflow::train;

namespace {

// Two far-apart Gaussian blobs, one per condition, with train and val copies.
data::Dataset blob_dataset(std::uint64_t seed, int n = 200) {
  Rng rng(seed);
  data::Dataset ds;
  ds.dim = 2;
  ds.descriptor_size = 2;
  const double centers[2][2] = {{-3.0, 0.0}, {3.0, 1.0}};
  for (int c = 0; c < 2; ++c)
    for (auto split : {data::Split::train, data::Split::val}) {
      data::Population p;
      p.condition_id = std::string(c == 0 ? "left" : "right") + (split == data::Split::train ? "" : "_val");
      p.split = split;
      p.descriptor = Vector::Zero(2);
      p.descriptor(c) = 1.0;
      p.samples = 0.2 * standard_normal(n, 2, rng);
      p.samples.col(0).array() += centers[c][0];
      p.samples.col(1).array() += centers[c][1];
      ds.populations.push_back(p);
    }
  return ds;
}

RunConfig small_config(ModelKind kind) {
  RunConfig c;
  c.model = kind;
  c.seed = 3;
  c.epochs = 10;
  c.iterations_per_epoch = 10;
  c.batch_size = 32;
  c.lr = 5e-3;
  c.velocity_hidden = {32, 32};
  c.base_hidden = {16};
  c.val_samples = 100;
  c.val_integrator = {flow::Method::rk4, 10};
  return c;
}

bool same_mlp(const nn::MlpParams& a, const nn::MlpParams& b) {
  for (std::size_t l = 0; l < a.num_layers(); ++l)
    if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
  return true;
}

bool same_base(const mixture::BasePredictor& a, const mixture::BasePredictor& b) {
  return same_mlp(a.weight_head, b.weight_head) && a.free_theta == b.free_theta &&
         (a.mode_source == mixture::ModeSource::free_parameters || same_mlp(a.mode_head, b.mode_head));
}

}  // namespace

TEST_CASE("planner: warm-up, alternating and cool-down decisions") {
  TrainingPlan plan{1, 2, 1, 4};
  for (long long it : {0LL, 3LL, 17LL}) {
    PlannerDecision d = planner_next(plan, 0, it);
    CHECK(d.mode_train == ModeTrain::velocity_field);
    CHECK_FALSE(d.flag_settoeval_H);
    PlannerDecision c = planner_next(plan, 3, it);
    CHECK(c.mode_train == ModeTrain::velocity_field);
    CHECK(c.flag_settoeval_H);
  }
  const ModeTrain v = ModeTrain::velocity_field, b = ModeTrain::base_distribution;
  std::vector<ModeTrain> want{v, v, v, v, b, v, v, v, v, b};
  for (int it = 0; it < 10; ++it) {
    PlannerDecision d = planner_next(plan, 1, it);
    CHECK(d.mode_train == want[it]);
    CHECK_FALSE(d.flag_settoeval_H);
  }
  CHECK_THROWS_AS(planner_next(plan, 4, 0), ValidationError);
  CHECK_THROWS_AS(planner_next(plan, -1, 0), ValidationError);
}

TEST_CASE("planner: default split is 20/60/20") {
  TrainingPlan p = default_plan(50);
  CHECK(p.warmup_epochs == 10);
  CHECK(p.alternating_epochs == 30);
  CHECK(p.cooldown_epochs == 10);
  CHECK(default_plan(0).total_epochs() == 0);
}

TEST_CASE("temperature anneals geometrically across the alternating period") {
  RunConfig c = small_config(ModelKind::mixflow);
  c.epochs = 10;  // plan 2 / 6 / 2
  CHECK(temperature_at(c, 0, 0, 10) == doctest::Approx(1.0));
  CHECK(temperature_at(c, 2, 0, 10) == doctest::Approx(1.0));
  CHECK(temperature_at(c, 5, 0, 10) == doctest::Approx(std::sqrt(0.1)));
  CHECK(temperature_at(c, 9, 5, 10) == doctest::Approx(0.1));
}

TEST_CASE("train_iteration: exactly one parameter group moves") {
  data::Dataset ds = blob_dataset(1);
  const auto train = ds.of_split(data::Split::train);
  for (auto src : {mixture::ModeSource::free_parameters, mixture::ModeSource::predicted}) {
    RunConfig c = small_config(ModelKind::mixflow);
    c.mode_source = src;
    TrainState s = init_state(c, ds);
    TrainState before = s;
    train_iteration(s, {ModeTrain::velocity_field, false}, train, 0, 10);
    CHECK(same_base(*s.model.base, *before.model.base));
    CHECK_FALSE(same_mlp(s.model.velocity.net, before.model.velocity.net));
    CHECK(s.iteration == 1);

    before = s;
    train_iteration(s, {ModeTrain::base_distribution, false}, train, 1, 10);
    CHECK(same_mlp(s.model.velocity.net, before.model.velocity.net));
    CHECK_FALSE(same_base(*s.model.base, *before.model.base));
  }
  TrainState cfm = init_state(small_config(ModelKind::cfm), ds);
  CHECK_THROWS_AS(train_iteration(cfm, {ModeTrain::base_distribution, false}, train, 0, 10),
                  ValidationError);
}

TEST_CASE("train_iteration: identical seeds give identical trajectories for 100 iterations") {
  data::Dataset ds = blob_dataset(2);
  const auto train = ds.of_split(data::Split::train);
  RunConfig c = small_config(ModelKind::mixflow);
  c.base_dropout = 0.3;
  c.velocity_dropout = 0.1;
  TrainState a = init_state(c, ds), b = init_state(c, ds);
  const TrainingPlan plan{1, 8, 1, 4};
  for (int k = 0; k < 100; ++k) {
    const int epoch = k / 10, it = k % 10;
    a.epoch = b.epoch = epoch;
    const PlannerDecision d = planner_next(plan, epoch, it);
    IterationInfo ia = train_iteration(a, d, train, it, 10);
    IterationInfo ib = train_iteration(b, d, train, it, 10);
    CHECK(ia.loss == ib.loss);
  }
  CHECK(same_mlp(a.model.velocity.net, b.model.velocity.net));
  CHECK(same_base(*a.model.base, *b.model.base));
}

TEST_CASE("base parameters are frozen through warm-up and cool-down epochs") {
  data::Dataset ds = blob_dataset(3);
  const auto train = ds.of_split(data::Split::train);
  RunConfig c = small_config(ModelKind::mixflow);
  TrainState s = init_state(c, ds);
  const TrainingPlan plan{1, 1, 1, 2};
  for (int epoch = 0; epoch < 3; ++epoch) {
    s.epoch = epoch;
    const mixture::BasePredictor start = *s.model.base;
    for (int it = 0; it < 10; ++it) train_iteration(s, planner_next(plan, epoch, it), train, it, 10);
    if (epoch == 1)
      CHECK_FALSE(same_base(*s.model.base, start));
    else
      CHECK(same_base(*s.model.base, start));
  }
}

TEST_CASE("config: defaults round-trip, overrides, and enumerated problems") {
  RunConfig c = small_config(ModelKind::cfm);
  RunConfig back = config_from_json(nlohmann::json::parse(to_json(c).dump()));
  CHECK(to_json(back) == to_json(c));

  nlohmann::json doc = to_json(RunConfig{});
  apply_override(doc, "trainer.lr", "0.05");
  apply_override(doc, "model", "cfm");
  apply_override(doc, "velocity.hidden", "[8,8,8]");
  RunConfig o = config_from_json(doc);
  CHECK(o.lr == 0.05);
  CHECK(o.model == ModelKind::cfm);
  CHECK(o.velocity_hidden == std::vector<int>{8, 8, 8});

  nlohmann::json bad = to_json(RunConfig{});
  bad["trainer"]["batch_size"] = 0;
  bad["trainer"]["lr"] = -1.0;
  bad["base"]["sigma2"] = 0.0;
  bad["typo"] = 1;
  try {
    config_from_json(bad);
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("4 problems") != std::string::npos);
    CHECK(msg.find("trainer.batch_size") != std::string::npos);
    CHECK(msg.find("trainer.lr") != std::string::npos);
    CHECK(msg.find("base.sigma2") != std::string::npos);
    CHECK(msg.find("typo") != std::string::npos);
  }
}

TEST_CASE("checkpoint: documented keys and faithful restore") {
  data::Dataset ds = blob_dataset(4);
  for (auto kind : {ModelKind::mixflow, ModelKind::cfm}) {
    TrainState s = init_state(small_config(kind), ds);
    train_iteration(s, {ModeTrain::velocity_field, false}, ds.of_split(data::Split::train), 0, 10);
    nlohmann::json j = checkpoint_json(s);
    for (const char* key : {"config", "velocity", "base", "opt_state", "epoch", "rng_state"})
      CHECK(j.contains(key));
    if (kind == ModelKind::cfm) CHECK(j["base"]["sigma2"] == 1.0);
    TrainState r = checkpoint_from_json(nlohmann::json::parse(j.dump()));
    CHECK(r.iteration == s.iteration);
    CHECK(same_mlp(r.model.velocity.net, s.model.velocity.net));
    CHECK(r.opt_velocity.step == s.opt_velocity.step);
    Rng g1(9), g2(9);
    const Vector y = ds.populations[0].descriptor;
    CHECK(r.model.generate(y, 20, {flow::Method::rk4, 5}, g1) ==
          s.model.generate(y, 20, {flow::Method::rk4, 5}, g2));
  }
}

TEST_CASE("fit: zero epochs returns the initial checkpoint and an empty log") {
  data::Dataset ds = blob_dataset(5);
  RunConfig c = small_config(ModelKind::mixflow);
  c.epochs = 0;
  FitResult r = fit(c, ds);
  CHECK(r.log.empty());
  CHECK(r.best_epoch == 0);
  CHECK(r.best.iteration == 0);
  TrainState init = init_state(c, ds);
  CHECK(same_mlp(r.best.model.velocity.net, init.model.velocity.net));
}

TEST_CASE("fit: training beats the untrained model and writes artifacts") {
  data::Dataset ds = blob_dataset(6);
  // single condition, identical train and val
  data::Dataset one;
  one.dim = 2;
  one.descriptor_size = 2;
  one.populations = {ds.populations[0], ds.populations[0]};
  one.populations[1].split = data::Split::val;
  RunConfig c = small_config(ModelKind::mixflow);
  c.epochs = 15;
  const auto dir = std::filesystem::temp_directory_path() / "mixflow_test_fit";
  std::filesystem::remove_all(dir);
  c.checkpoint_dir = dir.string();
  FitResult r = fit(c, one);
  CHECK(r.abort_reason.empty());
  TrainState init = init_state(c, one);
  const auto val = one.of_split(data::Split::val);
  const double before =
      evaluate(init.model, val, c.val_samples, c.val_integrator, c.seed, c.metric_cap)[0].w2;
  CHECK(r.best_w2 < before);
  CHECK(r.log.size() == 15);
  CHECK(std::filesystem::exists(dir / "best.json"));
  CHECK(std::filesystem::exists(dir / "last.json"));
  std::ifstream csv(dir / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "epoch,condition_id,mmd,w1,w2,ed");
  TrainState best = load_checkpoint((dir / "best.json").string());
  CHECK(best.epoch == r.best_epoch);
}

TEST_CASE("fit: mixflow beats cfm on well-separated blobs (median of 3 seeds)") {
  std::vector<double> mf, cfm;
  for (std::uint64_t seed : {11, 12, 13}) {
    data::Dataset ds = blob_dataset(seed);
    for (auto kind : {ModelKind::mixflow, ModelKind::cfm}) {
      RunConfig c = small_config(kind);
      c.seed = seed;
      c.epochs = 30;
      c.base_lr = 0.05;
      (kind == ModelKind::mixflow ? mf : cfm).push_back(fit(c, ds).best_w2);
    }
  }
  std::sort(mf.begin(), mf.end());
  std::sort(cfm.begin(), cfm.end());
  CHECK(mf[1] <= cfm[1]);
}
