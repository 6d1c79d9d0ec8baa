#pragma once

// Distribution diagnostics for trained terminal samples: moments, random
// affine projections scored by the average Wasserstein distance, Q-Q pairs.

#include <cstddef>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "smot/autodiff.hpp"
#include "smot/density.hpp"
#include "smot/random.hpp"

namespace smot::validate {

struct Moments {
  std::vector<double> mean;
  std::vector<double> cov;  // d x d row-major, divisor n - 1
};

Moments empirical_moments(const ad::Tensor& samples);

// (1/n) sum_i (x_i - y_i)^2 / sigma_bar^2 for ascending x and y.
double avg_wasserstein(std::span<const double> sorted_x, std::span<const double> sorted_y, double sigma_bar);

// Average Wasserstein distance of the projection samples * b against the
// plotting quantiles of N(mu^T b, b^T Sigma b).
double affine_metric(const ad::Tensor& samples, const density::TargetSpec& target, std::span<const double> b);

struct AffineSuite {
  std::vector<double> empirical;  // one value per direction
  std::vector<double> baseline;   // same metric on fresh target samples
};

AffineSuite affine_projection_suite(const ad::Tensor& samples, const density::TargetSpec& target, std::size_t k,
                                    Rng& rng);

// (sorted sample i, F^{-1}((i - 0.5) / n)).
std::vector<std::pair<double, double>> qq_pairs(std::span<const double> samples, const density::TargetSpec& target);

struct MarginSummary {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<std::pair<double, double>> qq;
};

struct MetricsReport {
  Moments moments;
  std::vector<MarginSummary> margins;
  AffineSuite affine;  // empty when the target is not Gaussian or k = 0
};

MetricsReport compute_metrics(const ad::Tensor& samples, const density::TargetSpec& target, std::size_t k, Rng& rng);

double median(std::vector<double> values);

// metrics.json, wasserstein_hist.csv (direction, empirical, baseline) and
// qq.csv (margin, sample_quantile, theoretical_quantile).
void write_metrics_json(const std::filesystem::path& path, const MetricsReport& report,
                        const density::TargetSpec& target);
void write_wasserstein_hist_csv(const std::filesystem::path& path, const AffineSuite& suite);
void write_qq_csv(const std::filesystem::path& path, const MetricsReport& report);

}  // namespace smot::validate
