#pragma once

#include <CLI11.hpp>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

namespace mixflow::cli {

// Seed taken from a --config file, if it had one.
std::optional<std::uint64_t>& config_seed();

// Seed precedence: explicit --seed, then MIXFLOW_SEED, then the config file,
// then `fallback`.
std::uint64_t resolve_seed(const CLI::Option* flag, std::uint64_t flag_value,
                           std::uint64_t fallback = 0);

// Parses a JSON file, raising IoError or ValidationError naming the path.
nlohmann::json read_json_file(const std::string& path);

void add_gen_data(CLI::App& app);
void add_train(CLI::App& app);
void add_sample(CLI::App& app);
void add_eval(CLI::App& app);
void add_theory(CLI::App& app);
void add_plot(CLI::App& app);

}  // namespace mixflow::cli
