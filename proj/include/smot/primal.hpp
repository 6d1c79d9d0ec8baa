#pragma once

// Penalised primal training: running cost plus a terminal density penalty,
// minimised over a per-step network bank or a single merged network.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "smot/density.hpp"
#include "smot/nn.hpp"
#include "smot/sde.hpp"

namespace smot::primal {

struct SquaredL2 {
  double lambda = 5000.0;
};
struct KL {
  double lambda = 2000.0;
  double eps = 1e-12;
};
struct Wasserstein2 {
  double lambda = 4000.0;
};

using PenaltySpec = std::variant<SquaredL2, KL, Wasserstein2>;

double penalty_lambda(const PenaltySpec& p);

struct PrimalConfig {
  sde::SimConfig sim;
  nn::MlpConfig net;  // input/output widths are derived from sim
  sde::CostSpec cost = sde::DriftNormSq{};
  PenaltySpec penalty = SquaredL2{};
  density::TargetSpec target;
  std::size_t epochs = 100;
  std::size_t batch_size = 2000;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  std::size_t grid_points = 100;       // per axis
  double grid_half_width_sd = 4.0;
  std::size_t target_kde_samples = 0;  // 0 selects sim.paths
  bool centre_input = false;           // standardise the state input by the target's moments

  // Wealth dynamics allow control costs; see portfolio.
  void validate(bool wealth_dynamics = false) const;
};

// Terminal penalty C(rho, rho_bar) evaluated on mini-batches of a fixed size.
// The target side (grid density or quantiles) is computed once.
class TerminalPenalty {
 public:
  TerminalPenalty(const PenaltySpec& spec, const density::TargetSpec& target, std::size_t batch_size,
                  std::size_t grid_points, double half_width_sd, std::size_t target_samples, Rng& rng);

  ad::Var evaluate(ad::Var terminal) const;

  bool uses_grid() const { return grid_.has_value(); }
  const density::Grid& grid() const { return *grid_; }
  const density::Bandwidth& bandwidth() const { return bandwidth_; }
  const ad::Tensor& target_density() const { return rho_bar_; }

  // Grid KDE of an arbitrary sample set with the training bandwidth.
  ad::Tensor empirical_density(const ad::Tensor& samples) const;

 private:
  PenaltySpec spec_;
  std::size_t batch_size_;
  std::optional<density::Grid> grid_;
  density::Bandwidth bandwidth_;
  ad::Tensor rho_bar_;
  std::vector<double> quantiles_;
};

struct TrainReport {
  std::vector<double> cost_part;
  std::vector<double> penalty_part;
  std::vector<double> total;
  ad::Tensor terminal_samples;  // M x d, simulated after training with fresh increments
  sde::NetworkBank networks;
  std::size_t epochs_completed = 0;
  double wall_seconds = 0.0;
  std::size_t parameter_count = 0;

  // Grid densities of the final samples and the target (d <= 2 grid penalties only).
  std::optional<density::Grid> grid;
  ad::Tensor rho_empirical;
  ad::Tensor rho_target;
};

// Dynamics plugged into the shared training loop.
struct TrainingProblem {
  std::size_t noise_dim = 1;  // width of the Brownian increments
  std::function<sde::PathBatch(ad::Tape&, const sde::BoundBank&, const sde::Increments&)> simulate;
  // Optional hook run on every batch after the forward pass; `final` marks
  // the post-training sample chunks.
  std::function<void(const sde::PathBatch&, bool final)> observe;
};

TrainReport train_with(const PrimalConfig& config, const nn::MlpConfig& net, const TrainingProblem& problem);

// Per-step bank; config.sim.arch must be PerStepBank.
TrainReport train_primal(const PrimalConfig& config);
// Single network fed (X_n, n/N); config.sim.arch must be Merged.
TrainReport train_primal_merged(const PrimalConfig& config);

// Terminal states of `paths` fresh paths, simulated in chunks without
// gradients.
ad::Tensor simulate_terminal(const sde::NetworkBank& bank, const sde::SimConfig& sim, std::size_t paths,
                             std::size_t chunk, Rng& rng);
ad::Tensor simulate_terminal(const sde::NetworkBank& bank, const TrainingProblem& problem, const sde::SimConfig& sim,
                             std::size_t paths, std::size_t chunk, Rng& rng);

// loss.csv: epoch, cost_part, penalty_part, total.
void write_loss_csv(const std::filesystem::path& path, const TrainReport& report);

}  // namespace smot::primal
