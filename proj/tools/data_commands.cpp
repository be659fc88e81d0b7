#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "commands.hpp"
#include "mixflow/common/error.hpp"
#include "mixflow/data/dataset.hpp"
#include "mixflow/flow/flow.hpp"
#include "mixflow/metrics/metrics.hpp"
#include "mixflow/train/trainer.hpp"

namespace mixflow::cli {

namespace {

std::string data_csv(const std::string& dir) { return dir + "/data.csv"; }
std::string manifest_json(const std::string& dir) { return dir + "/manifest.json"; }

data::Dataset load_dir(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory '" + dir + "' not found");
  return data::load_populations(data_csv(dir), manifest_json(dir));
}

void ensure_parent(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) throw IoError("cannot create directory '" + parent.string() + "'");
}

flow::Method method_from_string(const std::string& name) {
  if (name == "rk4") return flow::Method::rk4;
  if (name == "euler") return flow::Method::euler;
  throw ValidationError("--method must be rk4 or euler, got '" + name + "'");
}

// --overrides left over after parsing: "--a.b=v" or "--a.b v".
std::vector<std::pair<std::string, std::string>> parse_overrides(
    const std::vector<std::string>& rest) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t k = 0; k < rest.size(); ++k) {
    const std::string& a = rest[k];
    if (a.rfind("--", 0) != 0 || a.size() < 3)
      throw ValidationError("unexpected argument '" + a + "' (overrides look like --trainer.lr=0.01)");
    const std::size_t eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else {
      if (k + 1 >= rest.size()) throw ValidationError("override '" + a + "' has no value");
      out.emplace_back(a.substr(2), rest[++k]);
    }
  }
  return out;
}

// A JSON vector or a condition id found in the dataset.
Vector parse_descriptor(const std::string& text, const std::string& data_dir) {
  if (!text.empty() && text.front() == '[') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      throw ValidationError("--descriptor is not a JSON vector: " + text);
    }
    Vector y(static_cast<Eigen::Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k) {
      if (!j[k].is_number()) throw ValidationError("--descriptor entries must be numbers");
      y(static_cast<Eigen::Index>(k)) = j[k].get<double>();
    }
    return y;
  }
  if (data_dir.empty())
    throw ValidationError("--descriptor '" + text + "' looks like a condition id; pass --data too");
  return load_dir(data_dir).find(text).descriptor;
}

}  // namespace

// ---- gen-data ----------------------------------------------------------------

void add_gen_data(CLI::App& app) {
  auto* cmd = app.add_subcommand("gen-data", "Render the rotated-letter benchmark");
  struct Opts {
    std::string letters = "AEHLST", val_letter = "S", out;
    int rotations = 20, samples = 200, copies = 3, resolution = 48;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--letters", o->letters, "Letters to render")->capture_default_str();
  cmd->add_option("--rotations", o->rotations, "Rotations per letter")->capture_default_str();
  cmd->add_option("--val-letter", o->val_letter, "Letter whose odd rotations are held out")
      ->capture_default_str();
  cmd->add_option("--samples", o->samples, "Points per population copy")->capture_default_str();
  cmd->add_option("--copies", o->copies, "Independent copies per condition")->capture_default_str();
  cmd->add_option("--resolution", o->resolution, "Glyph raster resolution")->capture_default_str();
  auto* seed = cmd->add_option("--seed", o->seed, "Random seed");
  cmd->add_option("--out", o->out, "Output directory")->required();
  cmd->add_option("--config", "JSON file with any of the above keys");
  cmd->callback([o, seed]() {
    if (o->val_letter.size() != 1)
      throw ValidationError("--val-letter must be a single letter, got '" + o->val_letter + "'");
    data::SyntheticConfig c;
    c.letters = o->letters;
    c.rotations = o->rotations;
    c.samples_per_copy = o->samples;
    c.copies_per_condition = o->copies;
    c.val_letter = o->val_letter[0];
    c.resolution = o->resolution;
    c.seed = resolve_seed(seed, o->seed);
    const data::Dataset ds = data::build_synthetic(c);
    std::error_code ec;
    std::filesystem::create_directories(o->out, ec);
    if (ec) throw IoError("cannot create --out directory '" + o->out + "'");
    data::save_populations(ds, data_csv(o->out), manifest_json(o->out));
    std::cout << "wrote " << ds.populations.size() << " populations ("
              << ds.of_split(data::Split::train).size() << " train, "
              << ds.of_split(data::Split::val).size() << " val) to " << o->out << "\n";
  });
}

// ---- train -------------------------------------------------------------------

void add_train(CLI::App& app) {
  auto* cmd = app.add_subcommand("train", "Fit MixFlow or the CFM baseline");
  cmd->allow_extras();
  struct Opts {
    std::string config, data, model, out;
    int epochs = -1;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--config", o->config, "Run config JSON");
  cmd->add_option("--data", o->data, "Dataset directory from gen-data")->required();
  cmd->add_option("--model", o->model, "mixflow or cfm (config key: model)");
  cmd->add_option("--out", o->out, "Checkpoint directory (config key: checkpoint_dir)");
  cmd->add_option("--epochs", o->epochs, "Epochs (config key: trainer.epochs)");
  auto* seed = cmd->add_option("--seed", o->seed, "Random seed (config key: seed)");
  cmd->footer("Any config key can be overridden as --section.key=value, e.g. --trainer.lr=0.01");
  cmd->callback([o, seed, cmd]() {
    nlohmann::json doc = o->config.empty() ? train::to_json(train::RunConfig{})
                                            : read_json_file(o->config);
    if (!doc.is_object()) throw ValidationError("config '" + o->config + "' must be a JSON object");
    if (!o->model.empty()) doc["model"] = o->model;
    if (!o->out.empty()) doc["checkpoint_dir"] = o->out;
    if (o->epochs >= 0) train::apply_override(doc, "trainer.epochs", std::to_string(o->epochs));
    for (const auto& [key, value] : parse_overrides(cmd->remaining()))
      train::apply_override(doc, key, value);
    if (doc.contains("seed") && doc["seed"].is_number_unsigned())
      doc["seed"] = resolve_seed(seed, o->seed, doc["seed"].get<std::uint64_t>());
    else if (!doc.contains("seed") || seed->count() > 0 || std::getenv("MIXFLOW_SEED"))
      doc["seed"] = resolve_seed(seed, o->seed);
    const train::RunConfig config = train::config_from_json(doc);
    if (config.checkpoint_dir.empty())
      throw ValidationError("train needs --out (or checkpoint_dir in the config)");

    const data::Dataset ds = load_dir(o->data);
    const train::FitResult r = train::fit(config, ds);
    if (!r.abort_reason.empty()) throw NumericalError(r.abort_reason);
    std::cout << "model " << train::to_string(config.model) << ", "
              << config.plan().total_epochs() << " epochs\n";
    if (std::isnan(r.best_w2))
      std::cout << "no validation metrics recorded\n";
    else
      std::cout << std::setprecision(6) << "best validation W2 " << r.best_w2 << " at epoch "
                << r.best_epoch << "\n";
    std::cout << "checkpoints in " << config.checkpoint_dir << "\n";
  });
}

// ---- sample ------------------------------------------------------------------

void add_sample(CLI::App& app) {
  auto* cmd = app.add_subcommand("sample", "Generate points from a checkpoint");
  struct Opts {
    std::string checkpoint, descriptor, data, out, method = "rk4";
    int n = 1000, steps = 100;
    std::vector<double> times{1.0};
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--checkpoint", o->checkpoint, "Checkpoint JSON")->required();
  cmd->add_option("--descriptor", o->descriptor, "JSON vector or a condition id (with --data)")
      ->required();
  cmd->add_option("--data", o->data, "Dataset directory for condition-id lookup");
  cmd->add_option("--n", o->n, "Number of points")->capture_default_str();
  cmd->add_option("--steps", o->steps, "Integration steps")->capture_default_str();
  cmd->add_option("--method", o->method, "rk4 or euler")->capture_default_str();
  cmd->add_option("--t-snapshots", o->times, "Times in [0, 1] to record")->take_all();
  auto* seed = cmd->add_option("--seed", o->seed, "Random seed");
  cmd->add_option("--out", o->out, "Output CSV")->required();
  cmd->add_option("--config", "JSON file with any of the above keys");
  cmd->callback([o, seed]() {
    if (o->n < 1) throw ValidationError("--n must be positive");
    const train::TrainState st = train::load_checkpoint(o->checkpoint);
    const Vector y = parse_descriptor(o->descriptor, o->data);
    if (y.size() != st.model.velocity.descriptor_size)
      throw ValidationError("--descriptor has " + std::to_string(y.size()) +
                            " entries, the checkpoint expects " +
                            std::to_string(st.model.velocity.descriptor_size));
    const flow::IntegratorConfig icfg{method_from_string(o->method), o->steps};
    icfg.validate();
    Rng rng(resolve_seed(seed, o->seed));
    const Matrix x0 = st.model.sample_base(y, o->n, rng);
    const std::vector<Matrix> snaps =
        flow::integrate_snapshots(st.model.velocity, x0, y, icfg, o->times);

    std::ostringstream csv;
    csv << "t";
    for (Eigen::Index d = 0; d < x0.cols(); ++d) csv << ",x" << d;
    csv << "\n" << std::setprecision(17);
    for (std::size_t k = 0; k < snaps.size(); ++k)
      for (Eigen::Index r = 0; r < snaps[k].rows(); ++r) {
        csv << o->times[k];
        for (Eigen::Index d = 0; d < snaps[k].cols(); ++d) csv << "," << snaps[k](r, d);
        csv << "\n";
      }
    ensure_parent(o->out);
    train::write_text(o->out, csv.str());
    std::cout << "wrote " << o->n << " points x " << snaps.size() << " snapshots to " << o->out
              << "\n";
  });
}

// ---- eval --------------------------------------------------------------------

void add_eval(CLI::App& app) {
  auto* cmd = app.add_subcommand("eval", "Score a checkpoint against a dataset split");
  struct Opts {
    std::string checkpoint, data, split = "val", out, method = "rk4";
    std::vector<std::string> conditions;
    int n = 1000, steps = 100;
    long long cap = metrics::kDefaultMetricCap;
    std::uint64_t seed = 0;
  };
  auto o = std::make_shared<Opts>();
  cmd->add_option("--checkpoint", o->checkpoint, "Checkpoint JSON")->required();
  cmd->add_option("--data", o->data, "Dataset directory")->required();
  cmd->add_option("--split", o->split, "train or val")->capture_default_str();
  cmd->add_option("--conditions", o->conditions, "Restrict to these condition ids")->take_all();
  cmd->add_option("--n", o->n, "Generated points per condition")->capture_default_str();
  cmd->add_option("--steps", o->steps, "Integration steps")->capture_default_str();
  cmd->add_option("--method", o->method, "rk4 or euler")->capture_default_str();
  cmd->add_option("--cap", o->cap, "Metric subsample cap")->capture_default_str();
  auto* seed = cmd->add_option("--seed", o->seed, "Random seed");
  cmd->add_option("--out", o->out, "Output directory for eval.csv and eval.json")->required();
  cmd->add_option("--config", "JSON file with any of the above keys");
  cmd->callback([o, seed]() {
    const train::TrainState st = train::load_checkpoint(o->checkpoint);
    const data::Dataset ds = load_dir(o->data);
    std::vector<const data::Population*> pops = ds.of_split(data::split_from_string(o->split));
    if (!o->conditions.empty()) {
      std::vector<std::string> missing;
      std::vector<const data::Population*> chosen;
      for (const std::string& id : o->conditions) {
        auto it = std::find_if(pops.begin(), pops.end(),
                               [&](const data::Population* p) { return p->condition_id == id; });
        if (it == pops.end())
          missing.push_back(id);
        else
          chosen.push_back(*it);
      }
      if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
        throw ValidationError("conditions not in the " + o->split + " split: " + list);
      }
      pops = chosen;
    }
    if (pops.empty()) throw ValidationError("the " + o->split + " split is empty");
    if (ds.descriptor_size != st.model.velocity.descriptor_size || ds.dim != st.model.velocity.dim)
      throw ValidationError("dataset shape (dim " + std::to_string(ds.dim) + ", descriptor " +
                            std::to_string(ds.descriptor_size) +
                            ") does not match the checkpoint");
    const flow::IntegratorConfig icfg{method_from_string(o->method), o->steps};
    icfg.validate();
    if (o->n < 1) throw ValidationError("--n must be positive");
    if (o->cap < 1) throw ValidationError("--cap must be positive");
    const auto reports =
        train::evaluate(st.model, pops, o->n, icfg, resolve_seed(seed, o->seed), o->cap);

    std::ostringstream csv;
    csv << "condition_id,mmd,w1,w2,ed\n" << std::setprecision(17);
    nlohmann::json per = nlohmann::json::array();
    const char* names[] = {"mmd", "w1", "w2", "ed"};
    std::vector<std::vector<double>> cols(4);
    for (std::size_t k = 0; k < pops.size(); ++k) {
      const metrics::MetricReport& r = reports[k];
      const double vals[] = {r.mmd, r.w1, r.w2, r.ed};
      csv << pops[k]->condition_id;
      for (int m = 0; m < 4; ++m) {
        csv << "," << vals[m];
        cols[m].push_back(vals[m]);
      }
      csv << "\n";
      nlohmann::json j = metrics::to_json(r);
      j["condition_id"] = pops[k]->condition_id;
      per.push_back(j);
    }
    nlohmann::json agg;
    for (int m = 0; m < 4; ++m) {
      const auto& v = cols[m];
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
      agg[names[m]] = {{"mean", mean}, {"std", sd}};
    }
    std::error_code ec;
    std::filesystem::create_directories(o->out, ec);
    if (ec) throw IoError("cannot create --out directory '" + o->out + "'");
    train::write_text(o->out + "/eval.csv", csv.str());
    train::write_text(o->out + "/eval.json",
                      nlohmann::json{{"split", o->split},
                                     {"conditions", per},
                                     {"aggregate", agg}}
                              .dump(2) +
                          "\n");
    std::cout << std::setprecision(6);
    for (int m = 0; m < 4; ++m)
      std::cout << names[m] << " " << agg[names[m]]["mean"].get<double>() << " +- "
                << agg[names[m]]["std"].get<double>() << "\n";
  });
}

}  // namespace mixflow::cli
