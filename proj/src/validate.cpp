#include "smot/validate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "smot/io.hpp"

namespace smot::validate {

using ad::Tensor;

Moments empirical_moments(const Tensor& samples) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  if (n < 2) throw std::invalid_argument("empirical_moments: at least two samples required");
  Moments m{std::vector<double>(d, 0.0), std::vector<double>(d * d, 0.0)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) m.mean[j] += samples(r, j);
  for (double& v : m.mean) v /= double(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = i; j < d; ++j) m.cov[i * d + j] += (samples(r, i) - m.mean[i]) * (samples(r, j) - m.mean[j]);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      m.cov[i * d + j] /= double(n - 1);
      m.cov[j * d + i] = m.cov[i * d + j];
    }
  return m;
}

double avg_wasserstein(std::span<const double> x, std::span<const double> y, double sigma_bar) {
  if (x.size() != y.size() || x.empty()) throw std::invalid_argument("avg_wasserstein: inputs must have equal nonzero length");
  if (!(sigma_bar > 0.0)) throw std::invalid_argument("avg_wasserstein: sigma_bar must be positive");
  if (!std::is_sorted(x.begin(), x.end()) || !std::is_sorted(y.begin(), y.end()))
    throw std::invalid_argument("avg_wasserstein: inputs must be sorted ascending");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / (double(x.size()) * sigma_bar * sigma_bar);
}

namespace {

struct Projection {
  double mean;
  double stddev;
};

Projection project_target(const density::Gaussian& g, std::span<const double> b) {
  const std::size_t d = b.size();
  double mu = 0.0, var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    mu += g.mean[i] * b[i];
    for (std::size_t j = 0; j < d; ++j) var += b[i] * g.cov[i * d + j] * b[j];
  }
  if (!(var > 0.0)) throw std::invalid_argument("affine_metric: direction has zero projected variance");
  return {mu, std::sqrt(var)};
}

std::vector<double> project_sorted(const Tensor& samples, std::span<const double> b) {
  std::vector<double> p(samples.rows(), 0.0);
  for (std::size_t r = 0; r < samples.rows(); ++r)
    for (std::size_t j = 0; j < b.size(); ++j) p[r] += samples(r, j) * b[j];
  std::sort(p.begin(), p.end());
  return p;
}

// Metric with standard-normal plotting quantiles z precomputed.
double score(const Tensor& samples, const density::Gaussian& g, std::span<const double> b, std::span<const double> z) {
  const Projection t = project_target(g, b);
  const std::vector<double> x = project_sorted(samples, b);
  std::vector<double> y(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) y[i] = t.mean + t.stddev * z[i];
  return avg_wasserstein(x, y, t.stddev);
}

std::vector<double> standard_quantiles(std::size_t n) {
  return density::plotting_quantiles(density::TargetSpec::gaussian({0.0}, {1.0}), n);
}

void check_affine_inputs(const Tensor& samples, const density::TargetSpec& target, std::size_t bdim) {
  if (!target.is_gaussian()) throw std::invalid_argument("affine metric: target must be Gaussian");
  if (samples.cols() != target.dim() || bdim != target.dim())
    throw std::invalid_argument("affine metric: dimension mismatch");
}

}  // namespace

double affine_metric(const Tensor& samples, const density::TargetSpec& target, std::span<const double> b) {
  check_affine_inputs(samples, target, b.size());
  return score(samples, target.as_gaussian(), b, standard_quantiles(samples.rows()));
}

AffineSuite affine_projection_suite(const Tensor& samples, const density::TargetSpec& target, std::size_t k, Rng& rng) {
  check_affine_inputs(samples, target, samples.cols());
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  const auto z = standard_quantiles(n);
  const auto& g = target.as_gaussian();
  std::normal_distribution<double> normal(0.0, 1.0);
  AffineSuite suite;
  std::vector<double> b(d);
  for (std::size_t i = 0; i < k; ++i) {
    for (double& v : b) v = normal(rng);
    suite.empirical.push_back(score(samples, g, b, z));
    suite.baseline.push_back(score(target.sample(rng, n), g, b, z));
  }
  return suite;
}

std::vector<std::pair<double, double>> qq_pairs(std::span<const double> samples, const density::TargetSpec& target) {
  std::vector<double> x(samples.begin(), samples.end());
  std::sort(x.begin(), x.end());
  const auto q = density::plotting_quantiles(target, x.size());
  std::vector<std::pair<double, double>> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = {x[i], q[i]};
  return out;
}

MetricsReport compute_metrics(const Tensor& samples, const density::TargetSpec& target, std::size_t k, Rng& rng) {
  if (samples.cols() != target.dim()) throw std::invalid_argument("compute_metrics: dimension mismatch");
  MetricsReport r;
  r.moments = empirical_moments(samples);
  const std::size_t d = samples.cols();
  for (std::size_t j = 0; j < d; ++j) {
    std::vector<double> column(samples.rows());
    for (std::size_t i = 0; i < samples.rows(); ++i) column[i] = samples(i, j);
    MarginSummary m;
    m.mean = r.moments.mean[j];
    m.stddev = std::sqrt(r.moments.cov[j * d + j]);
    m.qq = qq_pairs(column, target.marginal(j));
    r.margins.push_back(std::move(m));
  }
  if (target.is_gaussian() && k > 0) r.affine = affine_projection_suite(samples, target, k, rng);
  return r;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty input");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + std::ptrdiff_t(mid), v.end());
  const double upper = v[mid];
  if (v.size() % 2) return upper;
  return 0.5 * (upper + *std::max_element(v.begin(), v.begin() + std::ptrdiff_t(mid)));
}

namespace {

nlohmann::json summary(const std::vector<double>& v) {
  if (v.empty()) return nullptr;
  double mean = 0.0;
  for (double x : v) mean += x / double(v.size());
  return {{"count", v.size()},
          {"mean", mean},
          {"median", median(v)},
          {"min", *std::min_element(v.begin(), v.end())},
          {"max", *std::max_element(v.begin(), v.end())}};
}

}  // namespace

void write_metrics_json(const std::filesystem::path& path, const MetricsReport& r, const density::TargetSpec& target) {
  const std::size_t d = r.moments.mean.size();
  nlohmann::json j;
  j["dim"] = d;
  j["samples"] = r.margins.empty() ? 0 : r.margins.front().qq.size();
  j["mean"] = r.moments.mean;
  std::vector<std::vector<double>> cov(d, std::vector<double>(d));
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) cov[a][b] = r.moments.cov[a * d + b];
  j["covariance"] = cov;
  j["target_mean"] = target.mean();
  if (target.is_gaussian()) {
    const auto& g = target.as_gaussian();
    std::vector<std::vector<double>> tc(d, std::vector<double>(d));
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) tc[a][b] = g.cov[a * d + b];
    j["target_covariance"] = tc;
  }
  nlohmann::json margins = nlohmann::json::array();
  for (const auto& m : r.margins) margins.push_back({{"mean", m.mean}, {"std", m.stddev}});
  j["margins"] = margins;
  j["affine"] = {{"directions", r.affine.empirical.size()},
                 {"empirical", summary(r.affine.empirical)},
                 {"baseline", summary(r.affine.baseline)}};
  std::ofstream os(path);
  if (!os) throw io::IoError("cannot open " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw io::IoError("write failed: " + path.string());
}

void write_wasserstein_hist_csv(const std::filesystem::path& path, const AffineSuite& suite) {
  io::CsvWriter w(path, {"direction", "empirical", "baseline"});
  for (std::size_t i = 0; i < suite.empirical.size(); ++i) {
    w.cell(i + 1).cell(suite.empirical[i]).cell(suite.baseline[i]);
    w.end_row();
  }
}

void write_qq_csv(const std::filesystem::path& path, const MetricsReport& r) {
  io::CsvWriter w(path, {"margin", "sample_quantile", "theoretical_quantile"});
  for (std::size_t m = 0; m < r.margins.size(); ++m)
    for (const auto& [x, y] : r.margins[m].qq) {
      w.cell(m + 1).cell(x).cell(y);
      w.end_row();
    }
}

}  // namespace smot::validate
