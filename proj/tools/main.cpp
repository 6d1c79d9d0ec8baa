#include <iostream>

#include "CLI11.hpp"
#include "experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Train and validate distribution-steering SDE models from a JSON config"};
  std::string config;
  smot::cli::Overrides overrides;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::string out_dir;
  std::string mode;
  app.add_option("--config", config, "Experiment config (JSON)")->required();
  auto* seed_opt = app.add_option("--seed", seed, "Override the config seed");
  auto* epochs_opt = app.add_option("--epochs", epochs, "Override the number of epochs");
  auto* out_opt = app.add_option("--out-dir", out_dir, "Output directory");
  auto* mode_opt = app.add_option("--mode", mode, "Expected mode; must match the config");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return smot::cli::kConfig;
  }
  if (*seed_opt) overrides.seed = seed;
  if (*epochs_opt) overrides.epochs = epochs;
  if (*out_opt) overrides.out_dir = out_dir;
  if (*mode_opt) overrides.mode = mode;
  return smot::cli::run_file(config, overrides, std::cerr);
}
