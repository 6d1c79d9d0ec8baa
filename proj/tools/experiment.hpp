#pragma once

// Config-driven experiment runner behind the smot command line tool.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "smot/dual.hpp"
#include "smot/portfolio.hpp"
#include "smot/primal.hpp"

namespace smot::cli {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::string> mode;
};

// Block parsers; each fills defaults for absent keys and rejects unknown ones.
density::TargetSpec parse_target(const nlohmann::json& j);
primal::PrimalConfig parse_primal(const nlohmann::json& j, sde::ArchMode arch, std::uint64_t seed);
dual::DualConfig parse_dual(const nlohmann::json& j, std::uint64_t seed);
portfolio::PortfolioConfig parse_portfolio(const nlohmann::json& j, std::uint64_t seed);

// Inverse of the parsers: the full effective configuration.
nlohmann::json to_json(const density::TargetSpec& t);
nlohmann::json to_json(const primal::PrimalConfig& c);
nlohmann::json to_json(const dual::DualConfig& c);
nlohmann::json to_json(const portfolio::PortfolioConfig& c);

nlohmann::json load_config(const std::filesystem::path& path);

// Runs one experiment and returns its exit code; diagnostics go to `log`.
// Relative paths inside the config resolve against `base_dir`.
int run(nlohmann::json config, const Overrides& overrides, const std::filesystem::path& base_dir, std::ostream& log);
int run_file(const std::filesystem::path& config_path, const Overrides& overrides, std::ostream& log);

}  // namespace smot::cli
