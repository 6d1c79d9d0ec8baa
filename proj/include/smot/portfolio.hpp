#pragma once

// Wealth steering: a self-financing portfolio dX = X a^T mu dt + X a^T sigma dW
// (zero risk-free rate) whose allocation a is produced by networks and
// trained with the primal loop.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "smot/primal.hpp"
#include "smot/sde.hpp"

namespace smot::portfolio {

// Market parameters in force from time `start` until the next regime.
struct MarketRegime {
  double start = 0.0;
  std::vector<double> mu;
  std::vector<double> cov;  // assets x assets row-major, symmetric PSD
};

class MarketSpec {
 public:
  MarketSpec() = default;
  static MarketSpec constant(std::vector<double> mu, std::vector<double> cov);
  // Regimes sorted by start; the first must start at 0.
  static MarketSpec piecewise(std::vector<MarketRegime> regimes);

  std::size_t assets() const { return assets_; }
  bool empty() const { return regimes_.empty(); }
  const std::vector<MarketRegime>& regimes() const { return regimes_; }

  // Regime in force at time t.
  std::size_t regime_index(double t) const;
  const std::vector<double>& mu(double t) const { return regimes_[regime_index(t)].mu; }
  const std::vector<double>& cov(double t) const { return regimes_[regime_index(t)].cov; }
  // Symmetric square root of the covariance.
  const std::vector<double>& sigma(double t) const { return sigma_[regime_index(t)]; }
  // |nu|^2 = mu^T Sigma^{-1} mu (pseudo-inverse; infinite if mu is outside the range).
  double nu_sq(double t) const { return nu_sq_[regime_index(t)]; }

 private:
  std::size_t assets_ = 0;
  std::vector<MarketRegime> regimes_;
  std::vector<std::vector<double>> sigma_;
  std::vector<double> nu_sq_;
};

// Box of admissible allocations per asset.
struct ControlBox {
  std::vector<double> lo;
  std::vector<double> hi;

  static ControlBox uniform(std::size_t assets, double lo = -5.0, double hi = 5.0);
  std::size_t assets() const { return lo.size(); }
  void validate() const;
  // Box centre + half-width * tanh(raw), column by column.
  ad::Var squash(ad::Var raw) const;
  bool contains(const ad::Tensor& controls) const;
};

// Euler wealth paths for a state of width 1. Records controls, drifts B = X a^T mu
// and diffusions A = X^2 a^T Sigma a per step; dw must be assets-dimensional.
sde::PathBatch simulate_wealth(ad::Tape& tape, const sde::BoundBank& nets, const MarketSpec& market,
                               const ControlBox& box, const sde::SimConfig& sim, const sde::Increments& dw);

// max over entries of B^2 / nu_sq - A.
double check_constraint(std::span<const double> drift, std::span<const double> diffusion, double nu_sq);
// Worst violation over every recorded step of a wealth batch.
double check_constraint(const sde::PathBatch& batch, const MarketSpec& market);

struct PortfolioConfig {
  primal::PrimalConfig base;  // sim.dim = 1; net widths are derived
  MarketSpec market;
  ControlBox box;

  void validate() const;
};

struct PortfolioReport {
  primal::TrainReport train;
  std::vector<std::vector<double>> alpha_mean;  // per step, path mean per asset, final samples
  double negative_wealth_fraction = 0.0;        // final paths that dip below zero
  double worst_violation = 0.0;                 // over every simulated batch
  double alpha_min = 0.0;
  double alpha_max = 0.0;
  bool controls_in_box = true;
};

PortfolioReport train_portfolio(const PortfolioConfig& config);

// alpha.csv: step, alpha_1..alpha_k.
void write_alpha_csv(const std::filesystem::path& path, const PortfolioReport& report);

}  // namespace smot::portfolio
