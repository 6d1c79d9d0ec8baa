#pragma once

// Adversarial training of the saddle-point dual: an AB-generator (drift and
// diffusion root) plays against a terminal potential Phi.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "smot/density.hpp"
#include "smot/nn.hpp"
#include "smot/sde.hpp"

namespace smot::dual {

struct DualConfig {
  sde::SimConfig sim;  // sim.paths is the size of the final terminal sample
  nn::MlpConfig ab_net;
  nn::MlpConfig phi_net;  // input d, output 1 (widths derived from sim)
  sde::CostSpec cost = sde::DriftNormSq{};
  density::TargetSpec target;
  std::size_t target_samples = 0;  // 0 selects 10 * batch_size
  std::size_t epochs = 1000;
  std::size_t batch_size = 1000;
  double lr_ab = 1e-4;
  double lr_phi = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool train_phi = true;  // false freezes Phi at its initial value
  // Fold the target samples' mean and std into Phi's first layer at init, so
  // its hidden units start with kinks inside the data range.
  bool centre_phi_input = true;
  // Re-simulate X_N with the updated AB-generator on the same increments
  // before the Phi update (alternating rather than simultaneous play).
  bool refresh_terminal = false;
  // Final samples are drawn in equal shares from `average_snapshots` copies of
  // the AB-generator spread over the last `average_fraction` of the epochs.
  // 0 keeps the last iterate only.
  double average_fraction = 0.0;
  // Optimistic updates: each player moves by 2 u_t - u_{t-1}, u the Adam step.
  bool optimistic = false;
  std::size_t average_snapshots = 20;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t effective_target_samples() const { return target_samples ? target_samples : 10 * batch_size; }
};

struct DualState {
  sde::NetworkBank ab;
  nn::MlpParams phi;
  nn::AdamState adam_ab;
  nn::AdamState adam_phi;
  // Previous Adam steps, used by optimistic updates.
  nn::MlpParams last_step_ab;
  nn::MlpParams last_step_phi;
  ad::Tensor target_samples;  // fixed for the whole run
};

DualState init_dual(const DualConfig& config);

// Mean of Phi over the rows of `samples`.
ad::Var mc_integral_phi(const nn::MlpParams& phi, const nn::MlpBinding& binding, ad::Var samples);
double mc_integral_phi(const nn::MlpParams& phi, const ad::Tensor& samples);

struct PhaseOne {
  double l1 = 0.0;
  double running_cost = 0.0;
  ad::Tensor terminal;  // X_N of the mini-batch
};

// One AB update: minimise L1 = -(mean Phi(X_N) - running cost) with Phi frozen.
PhaseOne phase_one(DualState& state, const DualConfig& config, const sde::Increments& dw);

// L2 = -mean Phi(target) + mean Phi(X_N) - running cost, X_N and the cost held fixed.
ad::Var loss_l2(const nn::MlpParams& phi, const nn::MlpBinding& binding, ad::Var terminal, ad::Var target,
                double running_cost);

// One Phi update on the Phase-one batch; returns L2 before the update.
double phase_two(DualState& state, const DualConfig& config, const PhaseOne& batch);

// Epochs (0-based, ascending) after which an AB snapshot is kept.
std::vector<std::size_t> snapshot_epochs(const DualConfig& config);

// Phase-one batch recomputed with the current AB-generator, no gradients.
void refresh_batch(const DualState& state, const DualConfig& config, const sde::Increments& dw, PhaseOne& batch);

struct DualReport {
  std::vector<double> l1;
  std::vector<double> l2;
  ad::Tensor terminal_samples;
  ad::Tensor last_iterate_samples;  // final AB-generator only; equals terminal_samples without averaging
  std::vector<std::size_t> snapshot_epochs;
  double value_estimate = 0.0;  // -L2 of the final epoch
  DualState state;
  std::size_t epochs_completed = 0;
  double wall_seconds = 0.0;
};

DualReport train_dual(const DualConfig& config);

// loss_dual.csv: epoch, L1, L2.
void write_loss_csv(const std::filesystem::path& path, const DualReport& report);

}  // namespace smot::dual
