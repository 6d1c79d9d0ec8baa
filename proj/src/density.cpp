#include "smot/density.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <boost/math/special_functions/erf.hpp>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "smot/io.hpp"

namespace smot::density {

using ad::Tensor;
using ad::Var;

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;

double normal_pdf(double x, double mu, double sd) {
  const double z = (x - mu) / sd;
  return kInvSqrt2Pi / sd * std::exp(-0.5 * z * z);
}

double normal_cdf(double x, double mu, double sd) { return 0.5 * std::erfc(-(x - mu) / (sd * std::numbers::sqrt2)); }

double normal_quantile(double u, double mu, double sd) {
  return mu - sd * std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * u);
}

void check_unit_interval(double u) {
  if (!(u > 0.0 && u < 1.0)) throw std::domain_error("quantile: u must lie in (0, 1)");
}

}  // namespace

// ---------------------------------------------------------------- TargetSpec

TargetSpec TargetSpec::gaussian(std::vector<double> mean, std::vector<double> cov) {
  const std::size_t d = mean.size();
  if (d == 0) throw std::invalid_argument("Gaussian target: empty mean");
  if (cov.size() != d * d) throw std::invalid_argument("Gaussian target: covariance must be d x d");
  Eigen::MatrixXd sigma(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) sigma(i, j) = cov[i * d + j];
  if (!sigma.isApprox(sigma.transpose(), 1e-12)) throw std::invalid_argument("Gaussian target: covariance not symmetric");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("Gaussian target: covariance not positive definite");

  TargetSpec t;
  t.dim_ = d;
  const Eigen::MatrixXd l = llt.matrixL();
  const Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
  t.chol_.resize(d * d);
  t.precision_.resize(d * d);
  double log_det = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    log_det += 2.0 * std::log(l(i, i));
    for (std::size_t j = 0; j < d; ++j) {
      t.chol_[i * d + j] = l(i, j);
      t.precision_[i * d + j] = inv(i, j);
    }
  }
  t.log_norm_ = -0.5 * (double(d) * std::log(2.0 * std::numbers::pi) + log_det);
  t.spec_ = Gaussian{std::move(mean), std::move(cov)};
  return t;
}

TargetSpec TargetSpec::mixture(std::vector<double> weights, std::vector<double> means, std::vector<double> stddevs) {
  if (weights.empty() || weights.size() != means.size() || weights.size() != stddevs.size())
    throw std::invalid_argument("Mixture target: weights, means and stddevs must have equal nonzero length");
  double total = 0.0;
  for (double w : weights) {
    if (!(w > 0.0)) throw std::invalid_argument("Mixture target: weights must be positive");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("Mixture target: weights must sum to 1");
  for (double s : stddevs)
    if (!(s > 0.0)) throw std::invalid_argument("Mixture target: stddevs must be positive");
  TargetSpec t;
  t.dim_ = 1;
  t.spec_ = Mixture{std::move(weights), std::move(means), std::move(stddevs)};
  return t;
}

void TargetSpec::require_defined() const {
  if (empty()) throw std::invalid_argument("target distribution is not set");
}

const Gaussian& TargetSpec::as_gaussian() const {
  if (!is_gaussian()) throw std::invalid_argument("target is not Gaussian");
  return std::get<Gaussian>(spec_);
}

const Mixture& TargetSpec::as_mixture() const {
  if (is_gaussian()) throw std::invalid_argument("target is not a mixture");
  return std::get<Mixture>(spec_);
}

double TargetSpec::pdf(std::span<const double> x) const {
  require_defined();
  if (x.size() != dim_) throw std::invalid_argument("pdf: point has wrong dimension");
  if (const auto* g = std::get_if<Gaussian>(&spec_)) {
    double q = 0.0;
    for (std::size_t i = 0; i < dim_; ++i)
      for (std::size_t j = 0; j < dim_; ++j)
        q += (x[i] - g->mean[i]) * precision_[i * dim_ + j] * (x[j] - g->mean[j]);
    return std::exp(log_norm_ - 0.5 * q);
  }
  const auto& m = std::get<Mixture>(spec_);
  double p = 0.0;
  for (std::size_t k = 0; k < m.weights.size(); ++k) p += m.weights[k] * normal_pdf(x[0], m.means[k], m.stddevs[k]);
  return p;
}

Tensor TargetSpec::sample(Rng& rng, std::size_t n) const {
  require_defined();
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out(n, dim_);
  if (const auto* g = std::get_if<Gaussian>(&spec_)) {
    std::vector<double> z(dim_);
    for (std::size_t r = 0; r < n; ++r) {
      for (double& v : z) v = normal(rng);
      for (std::size_t i = 0; i < dim_; ++i) {
        double acc = g->mean[i];
        for (std::size_t j = 0; j <= i; ++j) acc += chol_[i * dim_ + j] * z[j];
        out(r, i) = acc;
      }
    }
    return out;
  }
  const auto& m = std::get<Mixture>(spec_);
  std::discrete_distribution<std::size_t> pick(m.weights.begin(), m.weights.end());
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t k = pick(rng);
    out(r, 0) = m.means[k] + m.stddevs[k] * normal(rng);
  }
  return out;
}

double TargetSpec::cdf(double x) const {
  require_defined();
  if (dim_ != 1) throw std::invalid_argument("cdf: one-dimensional targets only");
  if (const auto* g = std::get_if<Gaussian>(&spec_)) return normal_cdf(x, g->mean[0], std::sqrt(g->cov[0]));
  const auto& m = std::get<Mixture>(spec_);
  double c = 0.0;
  for (std::size_t k = 0; k < m.weights.size(); ++k) c += m.weights[k] * normal_cdf(x, m.means[k], m.stddevs[k]);
  return c;
}

double TargetSpec::quantile(double u) const {
  require_defined();
  if (dim_ != 1) throw std::invalid_argument("quantile: one-dimensional targets only");
  check_unit_interval(u);
  if (const auto* g = std::get_if<Gaussian>(&spec_)) return normal_quantile(u, g->mean[0], std::sqrt(g->cov[0]));

  // Bisection on the mixture CDF, bracketed by the extreme component quantiles.
  const auto& m = std::get<Mixture>(spec_);
  double lo = normal_quantile(u, m.means[0], m.stddevs[0]);
  double hi = lo;
  for (std::size_t k = 0; k < m.weights.size(); ++k) {
    const double q = normal_quantile(u, m.means[k], m.stddevs[k]);
    lo = std::min(lo, q);
    hi = std::max(hi, q);
  }
  lo -= 1e-9;
  hi += 1e-9;
  for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
    const double mid = 0.5 * (lo + hi);
    (cdf(mid) < u ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<double> TargetSpec::mean() const {
  require_defined();
  if (const auto* g = std::get_if<Gaussian>(&spec_)) return g->mean;
  const auto& m = std::get<Mixture>(spec_);
  double mu = 0.0;
  for (std::size_t k = 0; k < m.weights.size(); ++k) mu += m.weights[k] * m.means[k];
  return {mu};
}

std::vector<double> TargetSpec::variance() const {
  require_defined();
  if (const auto* g = std::get_if<Gaussian>(&spec_)) {
    std::vector<double> v(dim_);
    for (std::size_t i = 0; i < dim_; ++i) v[i] = g->cov[i * dim_ + i];
    return v;
  }
  const auto& m = std::get<Mixture>(spec_);
  const double mu = mean()[0];
  double var = 0.0;
  for (std::size_t k = 0; k < m.weights.size(); ++k)
    var += m.weights[k] * (m.stddevs[k] * m.stddevs[k] + (m.means[k] - mu) * (m.means[k] - mu));
  return {var};
}

TargetSpec TargetSpec::marginal(std::size_t j) const {
  require_defined();
  if (j >= dim_) throw std::out_of_range("marginal: index out of range");
  if (const auto* g = std::get_if<Gaussian>(&spec_)) return gaussian({g->mean[j]}, {g->cov[j * dim_ + j]});
  return *this;
}

double target_pdf(const TargetSpec& target, std::span<const double> x) { return target.pdf(x); }
Tensor target_sample(const TargetSpec& target, Rng& rng, std::size_t n) { return target.sample(rng, n); }
double target_quantile(const TargetSpec& target, double u) { return target.quantile(u); }

std::vector<double> plotting_quantiles(const TargetSpec& target, std::size_t n) {
  std::vector<double> q(n);
  for (std::size_t i = 0; i < n; ++i) q[i] = target.quantile((double(i) + 0.5) / double(n));
  return q;
}

// ---------------------------------------------------------------- Grid

std::size_t Grid::size() const {
  std::size_t n = 1;
  for (const auto& a : axes) n *= a.points;
  return n;
}

double Grid::cell_volume() const {
  double v = 1.0;
  for (const auto& a : axes) v *= a.spacing();
  return v;
}

std::vector<double> Grid::point(std::size_t index) const {
  std::vector<double> x(axes.size());
  for (std::size_t k = axes.size(); k-- > 0;) {
    x[k] = axes[k].coordinate(index % axes[k].points);
    index /= axes[k].points;
  }
  return x;
}

void Grid::validate() const {
  if (axes.empty()) throw std::invalid_argument("Grid: no axes");
  for (const auto& a : axes) {
    if (!(a.lo < a.hi)) throw std::invalid_argument("Grid: lo must be < hi");
    if (a.points < 2) throw std::invalid_argument("Grid: at least two points per axis");
  }
}

Grid Grid::around(const TargetSpec& target, std::size_t points, double half_width_sd) {
  const auto mu = target.mean();
  const auto var = target.variance();
  const double half = half_width_sd * std::sqrt(*std::max_element(var.begin(), var.end()));
  Grid g;
  for (double m : mu) g.axes.push_back({m - half, m + half, points});
  g.validate();
  return g;
}

// ---------------------------------------------------------------- KDE

Bandwidth bandwidth_scott(std::span<const double> stddevs, std::size_t n) {
  if (n < 2) throw std::invalid_argument("bandwidth_scott: at least two samples required");
  const double factor = std::pow(double(n), -1.0 / (double(stddevs.size()) + 4.0));
  Bandwidth h;
  for (double s : stddevs) {
    if (!(s > 0.0)) throw std::invalid_argument("bandwidth_scott: zero-variance dimension");
    h.diag.push_back((s * factor) * (s * factor));
  }
  return h;
}

Bandwidth bandwidth_scott(const Tensor& samples) {
  const std::size_t n = samples.rows();
  if (n < 2) throw std::invalid_argument("bandwidth_scott: at least two samples required");
  std::vector<double> sd(samples.cols());
  for (std::size_t c = 0; c < samples.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean += samples(r, c);
    mean /= double(n);
    double ss = 0.0;
    for (std::size_t r = 0; r < n; ++r) ss += (samples(r, c) - mean) * (samples(r, c) - mean);
    sd[c] = std::sqrt(ss / double(n - 1));
  }
  return bandwidth_scott(sd, n);
}

namespace {

// M x I matrix of one-dimensional kernel values K_h(g_a - x_m) for one column of samples.
Var axis_kernel(Var column, const GridAxis& axis, double h_sq) {
  ad::Tape& tape = *column.tape;
  const std::size_t points = axis.points;
  Tensor neg_grid(1, points);
  for (std::size_t a = 0; a < points; ++a) neg_grid[a] = -axis.coordinate(a);
  Var spread = ad::matmul(column, tape.constant(Tensor(1, points, 1.0)));
  Var diff = ad::add(spread, tape.constant(std::move(neg_grid)));
  Var k = ad::exp(ad::scale(ad::square(diff), -0.5 / h_sq));
  return ad::scale(k, kInvSqrt2Pi / std::sqrt(h_sq));
}

}  // namespace

Var kde_on_grid(Var samples, const Grid& grid, const Bandwidth& h) {
  grid.validate();
  const std::size_t d = samples.cols();
  if (d > 2) throw std::invalid_argument("kde_on_grid: grid KDE is limited to d <= 2");
  if (grid.dim() != d || h.diag.size() != d) throw ad::ShapeError("kde_on_grid: dimension mismatch");
  for (double v : h.diag)
    if (!(v > 0.0)) throw std::invalid_argument("kde_on_grid: bandwidth entries must be positive");
  ad::Tape& tape = *samples.tape;
  const std::size_t m = samples.rows();
  if (d == 1) {
    Var k = axis_kernel(samples, grid.axes[0], h.diag[0]);
    return ad::scale(ad::matmul(tape.constant(Tensor(1, m, 1.0)), k), 1.0 / double(m));
  }
  // Product kernel: rho(g1_a, g2_b) = (1/M) sum_m K1[m, a] K2[m, b].
  Var k1 = axis_kernel(ad::slice_columns(samples, 0, 1), grid.axes[0], h.diag[0]);
  Var k2 = axis_kernel(ad::slice_columns(samples, 1, 2), grid.axes[1], h.diag[1]);
  return ad::scale(ad::matmul(ad::transpose(k1), k2), 1.0 / double(m));
}

Tensor kde_on_grid(const Tensor& samples, const Grid& grid, const Bandwidth& h) {
  // Chunked so that the M x I kernel matrices stay small for large samples.
  constexpr std::size_t kChunk = 8192;
  const std::size_t m = samples.rows();
  Tensor total;
  for (std::size_t start = 0; start < m; start += kChunk) {
    const std::size_t count = std::min(kChunk, m - start);
    Tensor part(count, samples.cols());
    std::copy_n(samples.data() + start * samples.cols(), count * samples.cols(), part.data());
    ad::Tape tape;
    Tensor rho = kde_on_grid(tape.constant(std::move(part)), grid, h).value();
    const double w = double(count) / double(m);
    if (total.empty()) {
      total = Tensor(rho.rows(), rho.cols(), 0.0);
    }
    for (std::size_t i = 0; i < rho.size(); ++i) total[i] += w * rho[i];
  }
  return total;
}

Tensor target_on_grid(const TargetSpec& target, const Grid& grid, const Bandwidth& h, std::size_t count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("target_on_grid: count must be >= 1");
  return kde_on_grid(target.sample(rng, count), grid, h);
}

// ---------------------------------------------------------------- penalties

Var penalty_l2(Var rho, Var rho_bar, double lambda, const Grid& grid) {
  return ad::scale(ad::sum_all(ad::square(ad::sub(rho, rho_bar))), 0.5 * lambda * grid.cell_volume());
}

Var penalty_kl(Var rho, Var rho_bar, double lambda, const Grid& grid, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("penalty_kl: floor must be positive");
  Var log_ratio = ad::sub(ad::log(ad::floor_at(rho, eps)), ad::log(ad::floor_at(rho_bar, eps)));
  return ad::scale(ad::sum_all(ad::mul(rho, log_ratio)), lambda * grid.cell_volume());
}

std::vector<std::size_t> sort_permutation(const Tensor& column) {
  if (column.cols() != 1) throw ad::ShapeError("sort_permutation: expected a single column");
  std::vector<std::size_t> perm(column.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return column[a] < column[b]; });
  return perm;
}

Var penalty_w2(Var samples, std::span<const double> quantiles, double lambda) {
  if (samples.cols() != 1) throw std::invalid_argument("penalty_w2: one-dimensional samples only");
  if (quantiles.size() != samples.rows()) throw ad::ShapeError("penalty_w2: quantile count mismatch");
  ad::Tape& tape = *samples.tape;
  Var sorted = ad::gather_rows(samples, sort_permutation(samples.value()));
  Var gap = ad::sub(sorted, tape.constant(Tensor::column(quantiles)));
  return ad::scale(ad::sum_all(ad::square(gap)), lambda);
}

Var penalty_w2(Var samples, const TargetSpec& target, double lambda) {
  if (samples.cols() != 1 || target.dim() != 1) throw std::invalid_argument("penalty_w2: one-dimensional samples only");
  const auto q = plotting_quantiles(target, samples.rows());
  return penalty_w2(samples, q, lambda);
}

void write_density_grid_csv(const std::filesystem::path& path, const Grid& grid, const Tensor& empirical,
                            const Tensor& target) {
  if (empirical.size() != grid.size() || target.size() != grid.size())
    throw ad::ShapeError("write_density_grid_csv: density size does not match grid");
  auto header = io::numbered_columns("x_", grid.dim());
  header.push_back("rho_empirical");
  header.push_back("rho_target");
  io::CsvWriter w(path, header);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    for (double x : grid.point(i)) w.cell(x);
    w.cell(empirical[i]).cell(target[i]);
    w.end_row();
  }
}

}  // namespace smot::density
