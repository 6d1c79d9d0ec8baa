#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <string>

#include "smot/validate.hpp"

namespace smot {
namespace {

using ad::Tensor;
using density::TargetSpec;
namespace v = validate;

Tensor column(std::vector<double> values) {
  Tensor t(values.size(), 1);
  std::copy(values.begin(), values.end(), t.values().begin());
  return t;
}

std::vector<double> normal_sorted(Rng& rng, std::size_t n, double mu = 0.0, double sd = 1.0) {
  std::normal_distribution<double> g(mu, sd);
  std::vector<double> x(n);
  for (double& value : x) value = g(rng);
  std::sort(x.begin(), x.end());
  return x;
}

TargetSpec target_2d() { return TargetSpec::gaussian({5.5, 6.0}, {0.25, 0.1, 0.1, 0.25}); }

TEST(Moments, TwoPoints) {
  const auto m = v::empirical_moments(column({0.0, 2.0}));
  EXPECT_DOUBLE_EQ(m.mean[0], 1.0);
  EXPECT_DOUBLE_EQ(m.cov[0], 2.0);
}

TEST(Moments, ConstantSamplesHaveZeroCovariance) {
  Tensor t(50, 3);
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t c = 0; c < 3; ++c) t(r, c) = double(c) + 0.5;
  const auto m = v::empirical_moments(t);
  for (double c : m.cov) EXPECT_EQ(c, 0.0);
  EXPECT_DOUBLE_EQ(m.mean[2], 2.5);
}

TEST(Moments, MonteCarloNormal) {
  Rng rng = make_rng(11, "moments");
  const auto samples = TargetSpec::gaussian({6.0}, {1.0}).sample(rng, 1'000'000);
  const auto m = v::empirical_moments(samples);
  EXPECT_NEAR(m.mean[0], 6.0, 0.004);
  EXPECT_NEAR(m.cov[0], 1.0, 0.01);
}

TEST(Moments, CovarianceIsSymmetric) {
  Rng rng = make_rng(3, "moments");
  const auto m = v::empirical_moments(target_2d().sample(rng, 5000));
  EXPECT_EQ(m.cov[1], m.cov[2]);
  EXPECT_NEAR(m.cov[1], 0.1, 0.02);
}

TEST(Moments, RejectsSingleSample) { EXPECT_THROW(v::empirical_moments(column({1.0})), std::invalid_argument); }

TEST(AvgWasserstein, IdenticalArraysGiveExactZero) {
  Rng rng = make_rng(1, "w");
  const auto x = normal_sorted(rng, 1000);
  EXPECT_EQ(v::avg_wasserstein(x, x, 0.7), 0.0);
}

TEST(AvgWasserstein, UniformShift) {
  Rng rng = make_rng(2, "w");
  const auto x = normal_sorted(rng, 1000);
  for (double c : {0.3, -1.25, 4.0}) {
    std::vector<double> y(x);
    for (double& value : y) value += c;
    for (double sigma : {1.0, 0.5, 2.0}) {
      const double expected = c * c / (sigma * sigma);
      EXPECT_NEAR(v::avg_wasserstein(x, y, sigma), expected, 1e-12 * std::max(1.0, expected));
    }
  }
}

TEST(AvgWasserstein, SymmetricInArguments) {
  Rng rng = make_rng(4, "w");
  const auto x = normal_sorted(rng, 500);
  const auto y = normal_sorted(rng, 500, 0.2, 1.3);
  EXPECT_DOUBLE_EQ(v::avg_wasserstein(x, y, 1.1), v::avg_wasserstein(y, x, 1.1));
}

TEST(AvgWasserstein, DecaysWithSampleSize) {
  const auto standard = TargetSpec::gaussian({0.0}, {1.0});
  std::vector<double> means;
  for (std::size_t n : {100u, 1000u, 10000u}) {
    const auto q = density::plotting_quantiles(standard, n);
    double sum = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      Rng rng = make_rng(5, "decay", std::uint64_t(n) * 100 + std::uint64_t(rep));
      sum += v::avg_wasserstein(normal_sorted(rng, n), q, 1.0);
    }
    means.push_back(sum / 20.0);
  }
  EXPECT_GT(means[2], 0.0);
  EXPECT_LT(means[1], means[0]);
  EXPECT_LT(means[2], means[1]);
  EXPECT_LT(means[2], 0.01);
}

TEST(AvgWasserstein, Errors) {
  const std::vector<double> sorted{0.0, 1.0, 2.0};
  const std::vector<double> unsorted{0.0, 2.0, 1.0};
  const std::vector<double> shorter{0.0, 1.0};
  EXPECT_THROW(v::avg_wasserstein(unsorted, sorted, 1.0), std::invalid_argument);
  EXPECT_THROW(v::avg_wasserstein(sorted, unsorted, 1.0), std::invalid_argument);
  EXPECT_THROW(v::avg_wasserstein(sorted, sorted, 0.0), std::invalid_argument);
  EXPECT_THROW(v::avg_wasserstein(sorted, sorted, -1.0), std::invalid_argument);
  EXPECT_THROW(v::avg_wasserstein(sorted, shorter, 1.0), std::invalid_argument);
}

TEST(AffineMetric, OneDimensionalProjectionMatchesRawSample) {
  const auto target = TargetSpec::gaussian({6.0}, {1.0});
  Rng rng = make_rng(6, "affine");
  const Tensor samples = target.sample(rng, 2000);
  std::vector<double> x(samples.values().begin(), samples.values().end());
  std::sort(x.begin(), x.end());
  const double raw = v::avg_wasserstein(x, density::plotting_quantiles(target, x.size()), 1.0);
  const std::vector<double> b{1.0};
  EXPECT_NEAR(v::affine_metric(samples, target, b), raw, 1e-12);
}

TEST(AffineMetric, InvariantToPositiveScaling) {
  const auto target = target_2d();
  Rng rng = make_rng(7, "affine");
  const Tensor samples = target.sample(rng, 3000);
  const std::vector<double> b{0.4, -1.3};
  const double base = v::affine_metric(samples, target, b);
  for (double s : {2.0, 10.0, 0.01}) {
    const std::vector<double> scaled{b[0] * s, b[1] * s};
    EXPECT_NEAR(v::affine_metric(samples, target, scaled), base, 1e-10);
  }
}

TEST(AffineMetric, DetectsShiftedSamples) {
  const auto target = target_2d();
  Rng rng = make_rng(8, "affine");
  Tensor samples = target.sample(rng, 4000);
  const std::vector<double> b{1.0, 0.0};
  const double clean = v::affine_metric(samples, target, b);
  for (std::size_t r = 0; r < samples.rows(); ++r) samples(r, 0) += 0.5;
  const double shifted = v::affine_metric(samples, target, b);
  EXPECT_LT(clean, 0.01);
  EXPECT_NEAR(shifted, 1.0, 0.1);  // shift 0.5 over sd 0.5
}

TEST(AffineMetric, Errors) {
  const auto mixture = TargetSpec::mixture({0.5, 0.5}, {4.0, 7.0}, {1.0, 1.0});
  const std::vector<double> b1{1.0};
  EXPECT_THROW(v::affine_metric(column({1.0, 2.0}), mixture, b1), std::invalid_argument);
  const std::vector<double> b2{1.0, 1.0};
  EXPECT_THROW(v::affine_metric(column({1.0, 2.0}), TargetSpec::gaussian({0.0}, {1.0}), b2), std::invalid_argument);
  const std::vector<double> zero{0.0, 0.0};
  Tensor two(3, 2);
  EXPECT_THROW(v::affine_metric(two, target_2d(), zero), std::invalid_argument);
}

TEST(AffineSuite, SelfConsistency) {
  const auto target = TargetSpec::gaussian({5.5, 6.0, 5.8, 6.0, 6.2},
                                           {0.25, 0.05, 0, 0, 0, 0.05, 0.25, 0, 0, 0, 0, 0, 0.25, 0, 0,
                                            0, 0, 0, 0.25, 0.05, 0, 0, 0, 0.05, 0.25});
  Rng sample_rng = make_rng(9, "samples");
  const Tensor samples = target.sample(sample_rng, 10000);
  Rng rng = make_rng(9, "directions");
  const auto suite = v::affine_projection_suite(samples, target, 100, rng);
  ASSERT_EQ(suite.empirical.size(), 100u);
  ASSERT_EQ(suite.baseline.size(), 100u);
  const double me = v::median(suite.empirical);
  const double mb = v::median(suite.baseline);
  EXPECT_LT(std::abs(me - mb), 0.2 * mb);
  for (double x : suite.empirical) EXPECT_GE(x, 0.0);
}

TEST(AffineSuite, DeterministicForSeed) {
  const auto target = target_2d();
  Rng s1 = make_rng(10, "samples");
  const Tensor samples = target.sample(s1, 500);
  Rng a = make_rng(10, "directions");
  Rng b = make_rng(10, "directions");
  const auto x = v::affine_projection_suite(samples, target, 10, a);
  const auto y = v::affine_projection_suite(samples, target, 10, b);
  EXPECT_EQ(x.empirical, y.empirical);
  EXPECT_EQ(x.baseline, y.baseline);
}

TEST(AffineSuite, RejectsNonGaussianTarget) {
  Rng rng(1);
  const auto mixture = TargetSpec::mixture({0.5, 0.5}, {4.0, 7.0}, {1.0, 1.0});
  EXPECT_THROW(v::affine_projection_suite(column({1.0, 2.0, 3.0}), mixture, 5, rng), std::invalid_argument);
}

TEST(QQ, SamplesAtQuantilesLieOnDiagonal) {
  const auto target = TargetSpec::gaussian({6.0}, {1.0});
  auto q = density::plotting_quantiles(target, 200);
  std::vector<double> shuffled(q);
  std::shuffle(shuffled.begin(), shuffled.end(), Rng(3));
  const auto pairs = v::qq_pairs(shuffled, target);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].first, q[i]);
    EXPECT_EQ(pairs[i].second, q[i]);
  }
}

TEST(QQ, SingleSampleIsMedian) {
  const std::vector<double> one{0.0};
  const auto pairs = v::qq_pairs(one, TargetSpec::gaussian({0.0}, {1.0}));
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].first, 0.0);
  EXPECT_NEAR(pairs[0].second, 0.0, 1e-14);
}

TEST(QQ, SecondCoordinateIndependentOfSamples) {
  const auto target = TargetSpec::gaussian({0.0}, {2.0});
  Rng rng(5);
  const auto a = v::qq_pairs(normal_sorted(rng, 64), target);
  const auto b = v::qq_pairs(normal_sorted(rng, 64, 3.0), target);
  const auto q = density::plotting_quantiles(target, 64);
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_EQ(a[i].second, q[i]);
    EXPECT_EQ(b[i].second, q[i]);
    if (i) EXPECT_GE(a[i].first, a[i - 1].first);
  }
}

TEST(QQ, MonteCarloCentralRanks) {
  const auto target = TargetSpec::gaussian({6.0}, {1.0});
  Rng rng = make_rng(12, "qq");
  const Tensor s = target.sample(rng, 100000);
  const auto pairs = v::qq_pairs(s.values(), target);
  double worst = 0.0;
  for (std::size_t i = 500; i < 99500; ++i) worst = std::max(worst, std::abs(pairs[i].first - pairs[i].second));
  EXPECT_LT(worst, 0.05);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(v::median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(v::median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_THROW(v::median({}), std::invalid_argument);
}

TEST(Report, ComputeAndWrite) {
  const auto target = target_2d();
  Rng sample_rng(21);
  const Tensor samples = target.sample(sample_rng, 400);
  Rng rng(22);
  const auto report = v::compute_metrics(samples, target, 25, rng);
  ASSERT_EQ(report.margins.size(), 2u);
  EXPECT_EQ(report.affine.empirical.size(), 25u);
  EXPECT_EQ(report.margins[1].qq.size(), 400u);
  EXPECT_DOUBLE_EQ(report.margins[0].stddev, std::sqrt(report.moments.cov[0]));

  const auto dir = std::filesystem::temp_directory_path() / "smot_validate_test";
  std::filesystem::create_directories(dir);
  v::write_metrics_json(dir / "metrics.json", report, target);
  v::write_wasserstein_hist_csv(dir / "wasserstein_hist.csv", report.affine);
  v::write_qq_csv(dir / "qq.csv", report);

  std::ifstream hist(dir / "wasserstein_hist.csv");
  std::string header;
  std::getline(hist, header);
  EXPECT_EQ(header, "direction,empirical,baseline");
  std::size_t rows = 0;
  for (std::string line; std::getline(hist, line);) ++rows;
  EXPECT_EQ(rows, 25u);

  std::ifstream qq(dir / "qq.csv");
  std::getline(qq, header);
  EXPECT_EQ(header, "margin,sample_quantile,theoretical_quantile");
  rows = 0;
  for (std::string line; std::getline(qq, line);) ++rows;
  EXPECT_EQ(rows, 800u);

  std::ifstream metrics(dir / "metrics.json");
  const std::string text((std::istreambuf_iterator<char>(metrics)), std::istreambuf_iterator<char>());
  EXPECT_NE(text.find("\"covariance\""), std::string::npos);
  EXPECT_NE(text.find("\"baseline\""), std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST(Report, NonGaussianTargetSkipsAffine) {
  const auto mixture = TargetSpec::mixture({0.5, 0.5}, {4.0, 7.0}, {1.0, 1.0});
  Rng rng(2);
  const auto samples = mixture.sample(rng, 300);
  const auto report = v::compute_metrics(samples, mixture, 10, rng);
  EXPECT_TRUE(report.affine.empirical.empty());
  EXPECT_EQ(report.margins[0].qq.size(), 300u);
}

}  // namespace
}  // namespace smot
