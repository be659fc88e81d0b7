#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "mixflow/common/error.hpp"

namespace mixflow::cli {

std::optional<std::uint64_t>& config_seed() {
  static std::optional<std::uint64_t> seed;
  return seed;
}

std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t flag_value,
                           std::uint64_t fallback) {
  if (flag && flag->count() > 0) return flag_value;
  if (const char* env = std::getenv("MIXFLOW_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw ValidationError(std::string("MIXFLOW_SEED must be a non-negative integer, got '") + env +
                          "'");
  }
  if (config_seed()) return *config_seed();
  return fallback;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("'" + path + "' is not valid JSON: " + e.what());
  }
}

namespace {

std::string scalar_text(const nlohmann::json& v) {
  return v.is_string() ? v.get<std::string>() : v.dump();
}

// For every subcommand except train, --config <json> supplies flag values:
// each key becomes --key, inserted ahead of the user's own flags so that
// the command line wins.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  if (args.size() < 2 || args[1] == "train") return args;
  for (std::size_t k = 2; k < args.size(); ++k) {
    std::string path;
    std::size_t width = 0;
    if (args[k] == "--config" && k + 1 < args.size()) {
      path = args[k + 1];
      width = 2;
    } else if (args[k].rfind("--config=", 0) == 0) {
      path = args[k].substr(9);
      width = 1;
    } else {
      continue;
    }
    const nlohmann::json doc = read_json_file(path);
    if (!doc.is_object()) throw ValidationError("config '" + path + "' must be a JSON object");
    std::vector<std::string> injected;
    for (const auto& [key, value] : doc.items()) {
      if (key == "seed") {
        if (!value.is_number_unsigned() && !value.is_number_integer())
          throw ValidationError("config '" + path + "': seed must be an integer");
        config_seed() = value.get<std::uint64_t>();
        continue;
      }
      injected.push_back("--" + key);
      if (value.is_array()) {
        for (const auto& item : value) injected.push_back(scalar_text(item));
      } else if (value.is_boolean()) {
        if (!value.get<bool>()) injected.pop_back();
      } else {
        injected.push_back(scalar_text(value));
      }
    }
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(k),
               args.begin() + static_cast<std::ptrdiff_t>(k + width));
    args.insert(args.begin() + 2, injected.begin(), injected.end());
    break;
  }
  return args;
}

}  // namespace

}  // namespace mixflow::cli

int main(int argc, char** argv) {
  using namespace mixflow;
  CLI::App app{"mixflow: mixture-conditioned flow matching workbench"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  cli::add_gen_data(app);
  cli::add_train(app);
  cli::add_sample(app);
  cli::add_eval(app);
  cli::add_theory(app);
  cli::add_plot(app);
  try {
    std::vector<std::string> args = cli::expand_config(std::vector<std::string>(argv, argv + argc));
    std::vector<std::string> rev(args.rbegin(), args.rend() - 1);
    try {
      app.parse(rev);
    } catch (const CLI::ParseError& e) {
      const int rc = app.exit(e);
      return rc == 0 ? 0 : 2;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
