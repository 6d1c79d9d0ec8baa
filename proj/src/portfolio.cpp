#include "smot/portfolio.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "smot/io.hpp"

namespace smot::portfolio {

using ad::Tensor;
using ad::Var;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

RowMatrix as_matrix(const std::vector<double>& v, std::size_t k) {
  return Eigen::Map<const RowMatrix>(v.data(), Eigen::Index(k), Eigen::Index(k));
}

}  // namespace

MarketSpec MarketSpec::constant(std::vector<double> mu, std::vector<double> cov) {
  return piecewise({MarketRegime{0.0, std::move(mu), std::move(cov)}});
}

MarketSpec MarketSpec::piecewise(std::vector<MarketRegime> regimes) {
  if (regimes.empty()) throw std::invalid_argument("MarketSpec: at least one regime required");
  if (regimes.front().start != 0.0) throw std::invalid_argument("MarketSpec: the first regime must start at t = 0");
  MarketSpec m;
  m.assets_ = regimes.front().mu.size();
  if (m.assets_ == 0) throw std::invalid_argument("MarketSpec: no assets");
  const std::size_t k = m.assets_;
  for (std::size_t i = 0; i < regimes.size(); ++i) {
    const auto& r = regimes[i];
    if (i && !(r.start > regimes[i - 1].start)) throw std::invalid_argument("MarketSpec: regime starts must increase");
    if (r.mu.size() != k || r.cov.size() != k * k) throw std::invalid_argument("MarketSpec: inconsistent regime sizes");
    const RowMatrix s = as_matrix(r.cov, k);
    if (!s.allFinite() || (s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, s.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("MarketSpec: covariance must be symmetric");
    Eigen::SelfAdjointEigenSolver<RowMatrix> eig(s);
    const double tol = 1e-12 * std::max(1.0, s.cwiseAbs().maxCoeff());
    if (eig.eigenvalues().minCoeff() < -tol) throw std::invalid_argument("MarketSpec: covariance must be positive semidefinite");
    const Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(0.0);
    const RowMatrix root = eig.eigenvectors() * lambda.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
    std::vector<double> sigma(k * k);
    Eigen::Map<RowMatrix>(sigma.data(), Eigen::Index(k), Eigen::Index(k)) = root;
    // mu^T Sigma^+ mu, infinite when mu leaves the range of Sigma.
    const Eigen::VectorXd proj = eig.eigenvectors().transpose() * Eigen::Map<const Eigen::VectorXd>(r.mu.data(), Eigen::Index(k));
    double nu_sq = 0.0;
    for (Eigen::Index i = 0; i < proj.size(); ++i) {
      if (lambda[i] > tol)
        nu_sq += proj[i] * proj[i] / lambda[i];
      else if (proj[i] != 0.0)
        nu_sq = std::numeric_limits<double>::infinity();
    }
    m.sigma_.push_back(std::move(sigma));
    m.nu_sq_.push_back(nu_sq);
  }
  m.regimes_ = std::move(regimes);
  return m;
}

std::size_t MarketSpec::regime_index(double t) const {
  if (regimes_.empty()) throw std::logic_error("MarketSpec: market is not set");
  std::size_t i = 0;
  while (i + 1 < regimes_.size() && regimes_[i + 1].start <= t) ++i;
  return i;
}

ControlBox ControlBox::uniform(std::size_t assets, double lo, double hi) {
  return {std::vector<double>(assets, lo), std::vector<double>(assets, hi)};
}

void ControlBox::validate() const {
  if (lo.empty() || lo.size() != hi.size()) throw std::invalid_argument("ControlBox: bounds must be non-empty and paired");
  for (std::size_t i = 0; i < lo.size(); ++i)
    if (!(std::isfinite(lo[i]) && std::isfinite(hi[i]) && lo[i] < hi[i]))
      throw std::invalid_argument("ControlBox: need finite lo < hi for every asset");
}

Var ControlBox::squash(Var raw) const {
  const std::size_t k = assets();
  if (raw.cols() != k) throw ad::ShapeError("ControlBox::squash: width differs from the number of assets");
  ad::Tape& tape = *raw.tape;
  Tensor centre(1, k), half(k, k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    centre(0, i) = 0.5 * (lo[i] + hi[i]);
    half(i, i) = 0.5 * (hi[i] - lo[i]);
  }
  return ad::add(ad::matmul(ad::tanh(raw), tape.constant(half)), tape.constant(centre));
}

bool ControlBox::contains(const Tensor& controls) const {
  if (controls.cols() != assets()) return false;
  for (std::size_t r = 0; r < controls.rows(); ++r)
    for (std::size_t c = 0; c < assets(); ++c)
      if (!(controls(r, c) >= lo[c] && controls(r, c) <= hi[c])) return false;
  return true;
}

namespace {

Tensor column_tensor(const std::vector<double>& v) {
  Tensor t(v.size(), 1);
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

Tensor square_tensor(const std::vector<double>& v, std::size_t k) {
  Tensor t(k, k);
  std::copy(v.begin(), v.end(), t.values().begin());
  return t;
}

// Row sums of an M x k node.
Var row_sum(Var a) {
  if (a.cols() == 1) return a;
  return ad::matmul(a, a.tape->constant(Tensor(a.cols(), 1, 1.0)));
}

}  // namespace

sde::PathBatch simulate_wealth(ad::Tape& tape, const sde::BoundBank& nets, const MarketSpec& market,
                               const ControlBox& box, const sde::SimConfig& sim, const sde::Increments& dw) {
  sim.validate();
  box.validate();
  const std::size_t k = market.assets();
  const std::size_t steps = sim.steps;
  if (sim.dim != 1) throw std::invalid_argument("simulate_wealth: wealth is one-dimensional");
  if (box.assets() != k) throw std::invalid_argument("simulate_wealth: control box and market disagree on assets");
  if (dw.dim != k || dw.steps() != steps) throw std::invalid_argument("simulate_wealth: increments do not match market");
  const std::size_t m = dw.paths;
  const double dt = sim.dt();

  sde::PathBatch batch;
  batch.dim = 1;
  batch.dt = dt;
  batch.increments = dw;
  try {
    Var x = tape.constant(Tensor(m, 1, sim.x0.front()));
    batch.states.push_back(x);
    const Var one = tape.constant(Tensor(1, 1, 1.0));
    for (std::size_t n = 0; n < steps; ++n) {
      const double t = double(n) * dt;
      const Var alpha = box.squash(nets.evaluate(n, steps, x));
      const Var mu = tape.constant(column_tensor(market.mu(t)));
      const Var sigma = tape.constant(square_tensor(market.sigma(t), k));
      const Var cov = tape.constant(square_tensor(market.cov(t), k));

      const Var excess = ad::matmul(alpha, mu);  // a^T mu
      const Var noise = row_sum(ad::mul(ad::matmul(alpha, sigma), tape.constant(dw.per_step[n])));
      const Var growth = ad::add(ad::add(ad::scale(excess, dt), noise), one);
      const Var quad = row_sum(ad::mul(ad::matmul(alpha, cov), alpha));  // a^T Sigma a

      batch.controls.push_back(alpha);
      batch.drifts.push_back(ad::mul(x, excess));
      batch.diffusions.push_back(ad::mul(ad::square(x), quad));
      x = ad::mul(x, growth);
      batch.states.push_back(x);
    }
  } catch (const ad::NonFiniteError& e) {
    throw sde::DivergenceError(std::string("wealth simulation diverged: ") + e.what());
  }
  return batch;
}

double check_constraint(std::span<const double> drift, std::span<const double> diffusion, double nu_sq) {
  if (drift.size() != diffusion.size()) throw std::invalid_argument("check_constraint: size mismatch");
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < drift.size(); ++i) {
    const double ratio = drift[i] == 0.0 ? 0.0 : drift[i] * drift[i] / nu_sq;
    worst = std::max(worst, ratio - diffusion[i]);
  }
  return worst;
}

double check_constraint(const sde::PathBatch& batch, const MarketSpec& market) {
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < batch.drifts.size(); ++n)
    worst = std::max(worst, check_constraint(batch.drifts[n].value().values(), batch.diffusions[n].value().values(),
                                             market.nu_sq(double(n) * batch.dt)));
  return worst;
}

void PortfolioConfig::validate() const {
  base.validate(true);
  if (base.sim.dim != 1) throw std::invalid_argument("portfolio: wealth state must be one-dimensional");
  if (market.empty()) throw std::invalid_argument("portfolio: market missing");
  box.validate();
  if (box.assets() != market.assets()) throw std::invalid_argument("portfolio: control box and market disagree on assets");
}

PortfolioReport train_portfolio(const PortfolioConfig& c) {
  c.validate();
  const std::size_t k = c.market.assets();
  const std::size_t steps = c.base.sim.steps;
  nn::MlpConfig net = c.base.net;
  net.input_dim = sde::network_input_dim(c.base.sim.arch, 1);
  net.output_dim = k;

  PortfolioReport report;
  report.alpha_min = std::numeric_limits<double>::infinity();
  report.alpha_max = -std::numeric_limits<double>::infinity();
  report.worst_violation = -std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> alpha_sum(steps, std::vector<double>(k, 0.0));
  std::size_t final_paths = 0, negative_paths = 0;

  primal::TrainingProblem problem;
  problem.noise_dim = k;
  problem.simulate = [&](ad::Tape& tape, const sde::BoundBank& bound, const sde::Increments& dw) {
    return simulate_wealth(tape, bound, c.market, c.box, c.base.sim, dw);
  };
  problem.observe = [&](const sde::PathBatch& batch, bool final) {
    report.worst_violation = std::max(report.worst_violation, check_constraint(batch, c.market));
    for (const Var& a : batch.controls) {
      const auto& v = a.value().values();
      report.alpha_min = std::min(report.alpha_min, *std::min_element(v.begin(), v.end()));
      report.alpha_max = std::max(report.alpha_max, *std::max_element(v.begin(), v.end()));
      report.controls_in_box = report.controls_in_box && c.box.contains(a.value());
    }
    if (!final) return;
    const std::size_t m = batch.paths();
    for (std::size_t n = 0; n < steps; ++n) {
      const Tensor& a = batch.controls[n].value();
      for (std::size_t p = 0; p < m; ++p)
        for (std::size_t j = 0; j < k; ++j) alpha_sum[n][j] += a(p, j);
    }
    for (std::size_t p = 0; p < m; ++p) {
      bool negative = false;
      for (const Var& x : batch.states) negative = negative || x.value()(p, 0) < 0.0;
      negative_paths += negative;
    }
    final_paths += m;
  };

  report.train = primal::train_with(c.base, net, problem);
  report.alpha_mean = std::move(alpha_sum);
  for (auto& row : report.alpha_mean)
    for (double& v : row) v /= double(final_paths);
  report.negative_wealth_fraction = double(negative_paths) / double(final_paths);
  return report;
}

void write_alpha_csv(const std::filesystem::path& path, const PortfolioReport& report) {
  const std::size_t k = report.alpha_mean.empty() ? 0 : report.alpha_mean.front().size();
  std::vector<std::string> header{"step"};
  for (auto& c : io::numbered_columns("alpha_", k)) header.push_back(c);
  io::CsvWriter w(path, header);
  for (std::size_t n = 0; n < report.alpha_mean.size(); ++n) {
    w.cell(n);
    for (double v : report.alpha_mean[n]) w.cell(v);
    w.end_row();
  }
}

}  // namespace smot::portfolio
