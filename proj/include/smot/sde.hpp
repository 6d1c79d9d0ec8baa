#pragma once

// Differentiable Euler-Maruyama simulation of dX = B dt + A dW on [0, 1].

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <variant>
#include <vector>

#include "smot/autodiff.hpp"
#include "smot/nn.hpp"
#include "smot/random.hpp"

namespace smot::sde {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ArchMode { PerStepBank, Merged };

struct SimConfig {
  std::size_t dim = 1;
  std::size_t steps = 16;
  std::size_t paths = 1000;
  std::vector<double> x0;
  ArchMode arch = ArchMode::PerStepBank;

  double dt() const { return 1.0 / double(steps); }
  void validate() const;
};

// One M x d tensor of Brownian increments per time step.
struct Increments {
  std::size_t dim = 0;
  std::size_t paths = 0;
  std::vector<ad::Tensor> per_step;

  std::size_t steps() const { return per_step.size(); }
};

Increments sample_increments(Rng& rng, std::size_t steps, std::size_t paths, std::size_t dim, double dt);

// Networks producing the per-step coefficients: N networks in PerStepBank
// mode (network n sees X_n), a single network fed (X_n, n/N) in Merged mode.
struct NetworkBank {
  ArchMode arch = ArchMode::PerStepBank;
  std::vector<nn::MlpParams> nets;

  std::size_t parameter_count() const;
};

// Input width of the coefficient networks for a state of width `state_dim`.
std::size_t network_input_dim(ArchMode arch, std::size_t state_dim);

NetworkBank make_bank(ArchMode arch, std::size_t steps, const nn::MlpConfig& net, Rng& rng);

struct BoundBank {
  const NetworkBank* bank = nullptr;
  std::vector<nn::MlpBinding> bindings;

  // Raw network output at time step `step` of `steps` for the given state.
  ad::Var evaluate(std::size_t step, std::size_t steps, ad::Var state) const;
};

BoundBank bind(ad::Tape& tape, const NetworkBank& bank, bool trainable = true);

struct PathBatch {
  std::size_t dim = 0;
  double dt = 0.0;
  std::vector<ad::Var> states;      // N + 1 entries, M x d
  std::vector<ad::Var> drifts;      // N entries, M x d
  std::vector<ad::Var> roots;       // N entries, M x d*d (empty for wealth paths)
  std::vector<ad::Var> diffusions;  // N entries, M x d*d; filled on demand when empty
  std::vector<ad::Var> controls;    // N entries, M x k (wealth paths only)
  Increments increments;

  ad::Var terminal() const { return states.back(); }
  std::size_t paths() const { return states.front().rows(); }
};

PathBatch simulate(ad::Tape& tape, const BoundBank& nets, const SimConfig& config, const Increments& dw);

struct DriftNormSq {};
struct DiffusionTarget {
  double target = 0.1;
};
struct DriftPlusDiffNormSq {};
struct ControlShiftSq {
  double shift = 0.5;
};

using CostSpec = std::variant<DriftNormSq, DiffusionTarget, DriftPlusDiffNormSq, ControlShiftSq>;

// (1/M) sum_m sum_n F(B_n^m, A_n^m) dt, recorded on the tape.
ad::Var running_cost(PathBatch& batch, const CostSpec& cost);

// Trajectory dump with columns path, step, x_1..x_d.
void write_paths_csv(const std::filesystem::path& path, const PathBatch& batch);

}  // namespace smot::sde
