#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "mixflow/common/error.hpp"
#include "mixflow/train/trainer.hpp"

namespace mixflow::train {

std::string to_string(ModelKind k) { return k == ModelKind::mixflow ? "mixflow" : "cfm"; }

ModelKind model_from_string(const std::string& name) {
  if (name == "mixflow") return ModelKind::mixflow;
  if (name == "cfm") return ModelKind::cfm;
  throw ValidationError("unknown model '" + name + "' (expected mixflow|cfm)");
}

TrainingPlan RunConfig::plan() const {
  TrainingPlan p = default_plan(epochs, flow_steps_per_base_step);
  if (warmup_epochs >= 0 || alternating_epochs >= 0 || cooldown_epochs >= 0) {
    p.warmup_epochs = std::max(0, warmup_epochs);
    p.alternating_epochs = std::max(0, alternating_epochs);
    p.cooldown_epochs = std::max(0, cooldown_epochs);
  }
  return p;
}

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> out;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) out.push_back(msg);
  };
  need(epochs >= 0, "trainer.epochs must be >= 0");
  need(flow_steps_per_base_step >= 0, "trainer.flow_steps_per_base_step must be >= 0");
  need(iterations_per_epoch >= 0, "trainer.iterations_per_epoch must be >= 0");
  need(batch_size >= 1, "trainer.batch_size must be >= 1");
  need(batch_size <= 512, "trainer.batch_size must be <= 512 (pairing cap)");
  need(lr > 0.0 && std::isfinite(lr), "trainer.lr must be positive");
  need(base_lr < 0.0 || (base_lr > 0.0 && std::isfinite(base_lr)),
       "trainer.base_lr must be positive (or negative to reuse trainer.lr)");
  need(temperature_start > 0.0 && temperature_end > 0.0,
       "trainer.temperature_start and trainer.temperature_end must be positive");
  for (int h : velocity_hidden) need(h >= 1, "velocity.hidden widths must be >= 1");
  need(velocity_dropout >= 0.0 && velocity_dropout < 1.0, "velocity.dropout must be in [0, 1)");
  need(num_modes >= 0, "base.num_modes must be >= 0");
  for (int h : base_hidden) need(h >= 1, "base.hidden widths must be >= 1");
  need(base_dropout >= 0.0 && base_dropout < 1.0, "base.dropout must be in [0, 1)");
  need(sigma2 > 0.0 && std::isfinite(sigma2), "base.sigma2 must be positive");
  need(base_init_gain > 0.0, "base.init_gain must be positive");
  need(integrator.steps >= 1, "integrator.steps must be >= 1");
  need(val_samples >= 2, "validation.samples must be >= 2");
  need(val_every >= 1, "validation.every must be >= 1");
  need(val_integrator.steps >= 1, "validation.steps must be >= 1");
  need(metric_cap >= 2, "validation.metric_cap must be >= 2");
  const bool explicit_plan = warmup_epochs >= 0 || alternating_epochs >= 0 || cooldown_epochs >= 0;
  if (explicit_plan)
    need(warmup_epochs >= 0 && alternating_epochs >= 0 && cooldown_epochs >= 0,
         "trainer.warmup_epochs, alternating_epochs and cooldown_epochs must all be set together");
  return out;
}

void RunConfig::validate() const {
  const auto errs = problems();
  if (errs.empty()) return;
  std::ostringstream os;
  os << "invalid configuration (" << errs.size() << " problem" << (errs.size() > 1 ? "s" : "")
     << "):";
  for (const auto& e : errs) os << "\n  - " << e;
  throw ValidationError(os.str());
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = to_string(c.model);
  j["seed"] = c.seed;
  j["trainer"] = {{"epochs", c.epochs},
                  {"warmup_epochs", c.warmup_epochs},
                  {"alternating_epochs", c.alternating_epochs},
                  {"cooldown_epochs", c.cooldown_epochs},
                  {"flow_steps_per_base_step", c.flow_steps_per_base_step},
                  {"iterations_per_epoch", c.iterations_per_epoch},
                  {"batch_size", c.batch_size},
                  {"lr", c.lr},
                  {"base_lr", c.base_lr},
                  {"optimizer", nn::to_string(c.optimizer)},
                  {"temperature_start", c.temperature_start},
                  {"temperature_end", c.temperature_end},
                  {"per_sample_time", c.per_sample_time}};
  j["velocity"] = {{"hidden", c.velocity_hidden},
                   {"activation", nn::to_string(c.velocity_activation)},
                   {"dropout", c.velocity_dropout}};
  j["base"] = {{"num_modes", c.num_modes},
               {"mode_source", mixture::to_string(c.mode_source)},
               {"hidden", c.base_hidden},
               {"activation", nn::to_string(c.base_activation)},
               {"dropout", c.base_dropout},
               {"sigma2", c.sigma2},
               {"init_gain", c.base_init_gain}};
  j["cfm"] = {{"ot_pairing", c.cfm_ot_pairing}};
  j["integrator"] = {{"method", flow::to_string(c.integrator.method)},
                     {"steps", c.integrator.steps}};
  j["validation"] = {{"samples", c.val_samples},
                     {"every", c.val_every},
                     {"method", flow::to_string(c.val_integrator.method)},
                     {"steps", c.val_integrator.steps},
                     {"metric_cap", c.metric_cap}};
  j["checkpoint_dir"] = c.checkpoint_dir;
  return j;
}

namespace {

// Reads keys from one JSON object and remembers which were used.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name, std::vector<std::string>& errors)
      : j_(j), name_(std::move(name)), errors_(errors) {
    if (!j_.is_object()) errors_.push_back(name_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errors_.push_back(path(key) + " has the wrong type");
    }
  }

  template <typename T, typename F>
  void get_enum(const char* key, T& out, F parse) {
    std::string s;
    bool present = j_.is_object() && j_.contains(key);
    get(key, s);
    if (!present) return;
    try {
      out = parse(s);
    } catch (const ValidationError& e) {
      errors_.push_back(path(key) + ": " + e.what());
    }
  }

  void finish() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) errors_.push_back("unknown key " + path(it.key().c_str()));
  }

 private:
  std::string path(const char* key) const { return name_.empty() ? key : name_ + "." + key; }
  const nlohmann::json& j_;
  std::string name_;
  std::vector<std::string>& errors_;
  std::set<std::string> used_;
};

}  // namespace

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  std::vector<std::string> errors;
  static const nlohmann::json empty = nlohmann::json::object();
  auto sub = [&](const char* key) -> const nlohmann::json& {
    return j.is_object() && j.contains(key) ? j.at(key) : empty;
  };
  Section top(j, "", errors);
  top.get_enum("model", c.model, model_from_string);
  top.get("seed", c.seed);
  top.get("checkpoint_dir", c.checkpoint_dir);
  for (const char* k : {"trainer", "velocity", "base", "cfm", "integrator", "validation"}) {
    nlohmann::json ignored;
    top.get(k, ignored);
  }
  top.finish();

  Section tr(sub("trainer"), "trainer", errors);
  tr.get("epochs", c.epochs);
  tr.get("warmup_epochs", c.warmup_epochs);
  tr.get("alternating_epochs", c.alternating_epochs);
  tr.get("cooldown_epochs", c.cooldown_epochs);
  tr.get("flow_steps_per_base_step", c.flow_steps_per_base_step);
  tr.get("iterations_per_epoch", c.iterations_per_epoch);
  tr.get("batch_size", c.batch_size);
  tr.get("lr", c.lr);
  tr.get("base_lr", c.base_lr);
  tr.get_enum("optimizer", c.optimizer, nn::optimizer_from_string);
  tr.get("temperature_start", c.temperature_start);
  tr.get("temperature_end", c.temperature_end);
  tr.get("per_sample_time", c.per_sample_time);
  tr.finish();

  Section ve(sub("velocity"), "velocity", errors);
  ve.get("hidden", c.velocity_hidden);
  ve.get_enum("activation", c.velocity_activation, nn::activation_from_string);
  ve.get("dropout", c.velocity_dropout);
  ve.finish();

  Section ba(sub("base"), "base", errors);
  ba.get("num_modes", c.num_modes);
  ba.get_enum("mode_source", c.mode_source, mixture::mode_source_from_string);
  ba.get("hidden", c.base_hidden);
  ba.get_enum("activation", c.base_activation, nn::activation_from_string);
  ba.get("dropout", c.base_dropout);
  ba.get("sigma2", c.sigma2);
  ba.get("init_gain", c.base_init_gain);
  ba.finish();

  Section cf(sub("cfm"), "cfm", errors);
  cf.get("ot_pairing", c.cfm_ot_pairing);
  cf.finish();

  Section in(sub("integrator"), "integrator", errors);
  in.get_enum("method", c.integrator.method, flow::method_from_string);
  in.get("steps", c.integrator.steps);
  in.finish();

  Section va(sub("validation"), "validation", errors);
  va.get("samples", c.val_samples);
  va.get("every", c.val_every);
  va.get_enum("method", c.val_integrator.method, flow::method_from_string);
  va.get("steps", c.val_integrator.steps);
  va.get("metric_cap", c.metric_cap);
  va.finish();

  for (auto& e : c.problems()) errors.push_back(e);
  if (!errors.empty()) {
    std::ostringstream os;
    os << "invalid configuration (" << errors.size() << " problem"
       << (errors.size() > 1 ? "s" : "") << "):";
    for (const auto& e : errors) os << "\n  - " << e;
    throw ValidationError(os.str());
  }
  return c;
}

RunConfig config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ValidationError("empty override key");
  nlohmann::json* node = &doc;
  std::string::size_type start = 0;
  while (true) {
    const auto dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot - start);
    if (part.empty()) throw ValidationError("malformed override key '" + dotted_key + "'");
    if (!node->is_object()) *node = nlohmann::json::object();
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  *node = parsed.is_discarded() ? nlohmann::json(value) : parsed;
}

}  // namespace mixflow::train
