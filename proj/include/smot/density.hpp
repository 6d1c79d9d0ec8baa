#pragma once

// Analytic targets, Gaussian kernel density estimation on tensor grids, and
// the terminal penalties C(rho, rho_bar): squared L2, KL, and order-statistic W2.

#include <cstddef>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "smot/autodiff.hpp"
#include "smot/random.hpp"

namespace smot::density {

struct Gaussian {
  std::vector<double> mean;
  std::vector<double> cov;  // d x d row-major
};

// One-dimensional mixture of normals.
struct Mixture {
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stddevs;
};

class TargetSpec {
 public:
  // Empty placeholder (dim 0); every query on it throws.
  TargetSpec() = default;
  static TargetSpec gaussian(std::vector<double> mean, std::vector<double> cov);
  static TargetSpec mixture(std::vector<double> weights, std::vector<double> means, std::vector<double> stddevs);

  std::size_t dim() const { return dim_; }
  bool empty() const { return dim_ == 0; }
  bool is_gaussian() const { return std::holds_alternative<Gaussian>(spec_); }
  const Gaussian& as_gaussian() const;
  const Mixture& as_mixture() const;

  double pdf(std::span<const double> x) const;
  ad::Tensor sample(Rng& rng, std::size_t n) const;
  // One-dimensional targets only.
  double cdf(double x) const;
  double quantile(double u) const;

  std::vector<double> mean() const;
  std::vector<double> variance() const;  // per dimension

  // Law of coordinate j.
  TargetSpec marginal(std::size_t j) const;

 private:
  void require_defined() const;

  std::size_t dim_ = 0;
  std::variant<Gaussian, Mixture> spec_;
  std::vector<double> chol_;       // lower Cholesky factor of cov (Gaussian)
  std::vector<double> precision_;  // inverse of cov (Gaussian)
  double log_norm_ = 0.0;          // log normalising constant (Gaussian)
};

double target_pdf(const TargetSpec& target, std::span<const double> x);
ad::Tensor target_sample(const TargetSpec& target, Rng& rng, std::size_t n);
double target_quantile(const TargetSpec& target, double u);

// F^{-1}((i - 0.5) / n) for i = 1..n.
std::vector<double> plotting_quantiles(const TargetSpec& target, std::size_t n);

struct GridAxis {
  double lo = 0.0;
  double hi = 1.0;
  std::size_t points = 100;

  double spacing() const { return (hi - lo) / double(points); }
  // Cell-centred coordinate of point i.
  double coordinate(std::size_t i) const { return lo + (double(i) + 0.5) * spacing(); }
};

struct Grid {
  std::vector<GridAxis> axes;

  std::size_t dim() const { return axes.size(); }
  std::size_t size() const;
  double cell_volume() const;
  // Coordinates of flat index `index` (last axis varies fastest).
  std::vector<double> point(std::size_t index) const;

  void validate() const;

  // mean +/- half_width_sd * sqrt(max marginal variance) along every axis.
  static Grid around(const TargetSpec& target, std::size_t points, double half_width_sd = 4.0);
};

// Diagonal bandwidth matrix: entries are the variances h_i^2.
struct Bandwidth {
  std::vector<double> diag;
};

// Scott's rule, H_ii = (sd_i * n^(-1/(d+4)))^2.
Bandwidth bandwidth_scott(const ad::Tensor& samples);
Bandwidth bandwidth_scott(std::span<const double> stddevs, std::size_t n);

// Gaussian KDE of the rows of `samples` at every grid point. The result is a
// 1 x I tensor for d = 1 and I1 x I2 for d = 2 (row-major flat order).
ad::Var kde_on_grid(ad::Var samples, const Grid& grid, const Bandwidth& h);
ad::Tensor kde_on_grid(const ad::Tensor& samples, const Grid& grid, const Bandwidth& h);

// KDE of `count` fresh target draws with the same bandwidth as the empirical side.
ad::Tensor target_on_grid(const TargetSpec& target, const Grid& grid, const Bandwidth& h, std::size_t count,
                          Rng& rng);

// lambda/2 * sum (rho - rho_bar)^2 * cell volume.
ad::Var penalty_l2(ad::Var rho, ad::Var rho_bar, double lambda, const Grid& grid);

// lambda * sum rho * (log max(rho, eps) - log max(rho_bar, eps)) * cell volume.
ad::Var penalty_kl(ad::Var rho, ad::Var rho_bar, double lambda, const Grid& grid, double eps = 1e-12);

// lambda * sum_i (X_(i) - Y_i)^2 with Y_i the target plotting quantiles. The
// sorting permutation is computed off the tape (ties by original index).
ad::Var penalty_w2(ad::Var samples, const TargetSpec& target, double lambda);
ad::Var penalty_w2(ad::Var samples, std::span<const double> quantiles, double lambda);

// Stable ascending order of a single column.
std::vector<std::size_t> sort_permutation(const ad::Tensor& column);

// density_grid.csv: x_1..x_d, rho_empirical, rho_target.
void write_density_grid_csv(const std::filesystem::path& path, const Grid& grid, const ad::Tensor& empirical,
                            const ad::Tensor& target);

}  // namespace smot::density
