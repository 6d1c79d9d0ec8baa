#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "smot/dual.hpp"

namespace smot {
namespace {

using ad::Tape;
using ad::Tensor;
using ad::Var;

nn::MlpParams linear_phi(double slope, double bias) {
  nn::MlpConfig cfg{1, {}, 1};
  Rng rng(0);
  auto p = nn::init_mlp(cfg, rng);
  p.layers[0].weight = Tensor(1, 1, slope);
  p.layers[0].bias = Tensor(1, 1, bias);
  return p;
}

// ReLU network equal to the piecewise-linear interpolant of x^2 on a grid of
// spacing h over [-L, L]; its error is at most h^2 / 4 inside the range.
nn::MlpParams square_phi(double half_range, double h) {
  const std::size_t units = std::size_t(std::lround(2.0 * half_range / h));
  nn::MlpConfig cfg{1, {units}, 1};
  cfg.leaky_slope = 0.0;
  Rng rng(0);
  auto p = nn::init_mlp(cfg, rng);
  p.layers[0].weight = Tensor(1, units, 1.0);
  p.layers[0].bias = Tensor(1, units);
  p.layers[1].weight = Tensor(units, 1);
  for (std::size_t k = 0; k < units; ++k) {
    const double knot = -half_range + double(k) * h;
    p.layers[0].bias(0, k) = -knot;
    // First unit carries the first segment's slope, later units the slope change.
    p.layers[1].weight(k, 0) = k == 0 ? (std::pow(knot + h, 2) - knot * knot) / h : 2.0 * h;
  }
  p.layers[1].bias = Tensor(1, 1, half_range * half_range);
  return p;
}

// Per-column mean and sample standard deviation.
std::pair<std::vector<double>, std::vector<double>> column_moments(const Tensor& x) {
  std::vector<double> mean(x.cols(), 0.0), sd(x.cols(), 0.0);
  for (std::size_t j = 0; j < x.cols(); ++j) {
    for (std::size_t r = 0; r < x.rows(); ++r) mean[j] += x(r, j) / double(x.rows());
    for (std::size_t r = 0; r < x.rows(); ++r) sd[j] += (x(r, j) - mean[j]) * (x(r, j) - mean[j]);
    sd[j] = std::sqrt(sd[j] / double(x.rows() - 1));
  }
  return {mean, sd};
}

dual::DualConfig small_config(std::size_t d = 2) {
  dual::DualConfig c;
  c.sim.dim = d;
  c.sim.steps = 4;
  c.sim.paths = 600;
  c.sim.x0 = std::vector<double>(d, 5.0);
  c.sim.arch = sde::ArchMode::Merged;
  c.ab_net.hidden = {12, 8};
  c.phi_net.hidden = {10, 6};
  c.cost = sde::DriftNormSq{};
  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) cov[i * d + i] = 0.25;
  c.target = density::TargetSpec::gaussian(std::vector<double>(d, 6.0), cov);
  c.epochs = 5;
  c.batch_size = 200;
  c.lr_ab = 1e-3;
  c.lr_phi = 1e-3;
  c.seed = 5;
  return c;
}

sde::Increments increments(const dual::DualConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  return sde::sample_increments(rng, c.sim.steps, c.batch_size, c.sim.dim, c.sim.dt());
}

TEST(McIntegral, ConstantPotential) {
  Rng rng(1);
  const auto samples = density::TargetSpec::gaussian({6.0}, {1.0}).sample(rng, 100);
  EXPECT_DOUBLE_EQ(dual::mc_integral_phi(linear_phi(0.0, 2.5), samples), 2.5);
}

TEST(McIntegral, IdentityGivesMean) {
  Rng rng = make_rng(2, "mc");
  const auto samples = density::TargetSpec::gaussian({6.0}, {1.0}).sample(rng, 1'000'000);
  EXPECT_NEAR(dual::mc_integral_phi(linear_phi(1.0, 0.0), samples), 6.0, 0.004);
}

TEST(McIntegral, SquareGivesSecondMoment) {
  const double h = 0.1;
  const auto phi = square_phi(8.0, h);
  const Tensor probe = Tensor::column(std::vector<double>{-1.5, 0.0, 0.7, 3.0});
  Tape tape;
  const Tensor out = nn::forward_mlp(phi, nn::bind(tape, phi, false), tape.constant(probe)).value();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out(i, 0), probe(i, 0) * probe(i, 0), h * h / 4 + 1e-12);

  // Equal chunks keep the hidden activations small; their means average exactly.
  Rng rng = make_rng(3, "mc");
  const auto target = density::TargetSpec::gaussian({0.0}, {1.0});
  double total = 0.0;
  for (int chunk = 0; chunk < 20; ++chunk) total += dual::mc_integral_phi(phi, target.sample(rng, 50'000)) / 20.0;
  EXPECT_NEAR(total, 1.0, 0.01);
}

TEST(LossL2, HandComputed) {
  const auto phi = linear_phi(1.0, 0.0);
  Tape tape;
  const Var x = tape.constant(Tensor::column(std::vector<double>{1.0, 3.0}));
  const Var target = tape.constant(Tensor::column(std::vector<double>{2.0, 4.0, 6.0}));
  const Var l2 = dual::loss_l2(phi, nn::bind(tape, phi, false), x, target, 0.5);
  EXPECT_DOUBLE_EQ(l2.value().item(), 2.0 - 4.0 - 0.5);
}

TEST(LossL2, InvariantToConstantShift) {
  auto c = small_config();
  auto state = dual::init_dual(c);
  const auto one = dual::phase_one(state, c, increments(c, 9));
  auto value = [&](const nn::MlpParams& phi) {
    Tape tape;
    return dual::loss_l2(phi, nn::bind(tape, phi, false), tape.constant(one.terminal),
                         tape.constant(state.target_samples), one.running_cost)
        .value()
        .item();
  };
  const double base = value(state.phi);
  for (double shift : {1.0, -37.5, 1e3}) {
    auto shifted = state.phi;
    shifted.layers.back().bias(0, 0) += shift;
    EXPECT_NEAR(value(shifted), base, 1e-10);
  }
}

TEST(Phases, EachUpdatesOnlyItsPlayer) {
  auto c = small_config();
  auto state = dual::init_dual(c);
  const auto phi_before = state.phi;
  const auto ab_before = state.ab.nets.front();
  const auto one = dual::phase_one(state, c, increments(c, 1));
  EXPECT_TRUE(state.phi == phi_before);
  EXPECT_FALSE(state.ab.nets.front() == ab_before);

  const auto ab_mid = state.ab.nets.front();
  dual::phase_two(state, c, one);
  EXPECT_TRUE(state.ab.nets.front() == ab_mid);
  EXPECT_FALSE(state.phi == phi_before);
}

TEST(Phases, PhaseOneLossDefinition) {
  auto c = small_config(1);
  c.cost = sde::DiffusionTarget{0.1};
  auto state = dual::init_dual(c);
  const auto one = dual::phase_one(state, c, increments(c, 4));
  EXPECT_NEAR(one.l1, one.running_cost - dual::mc_integral_phi(state.phi, one.terminal), 1e-12);
  EXPECT_EQ(one.terminal.rows(), c.batch_size);
  const double l2 = dual::phase_two(state, c, one);
  // phase_two reports L2 before its own update, with the Phase-one Phi.
  EXPECT_TRUE(std::isfinite(l2));
}

TEST(Phases, ZeroPotentialCollapsesDrift) {
  auto c = small_config();
  c.train_phi = false;
  c.lr_ab = 3e-3;
  auto state = dual::init_dual(c);
  for (auto& layer : state.phi.layers) {
    std::fill(layer.weight.values().begin(), layer.weight.values().end(), 0.0);
    std::fill(layer.bias.values().begin(), layer.bias.values().end(), 0.0);
  }
  const auto phi_before = state.phi;
  double first = 0.0, last = 0.0;
  for (std::size_t e = 0; e < 300; ++e) {
    const auto one = dual::phase_one(state, c, increments(c, 100 + e));
    EXPECT_EQ(dual::phase_two(state, c, one), -one.running_cost);
    (e == 0 ? first : last) = one.running_cost;
  }
  EXPECT_TRUE(state.phi == phi_before);
  EXPECT_LT(last, 0.01);
  EXPECT_LT(last, first);
}

TEST(TrainDual, ReportShapesAndDeterminism) {
  const auto c = small_config();
  const auto a = dual::train_dual(c);
  const auto b = dual::train_dual(c);
  ASSERT_EQ(a.l1.size(), c.epochs);
  ASSERT_EQ(a.l2.size(), c.epochs);
  EXPECT_EQ(a.epochs_completed, c.epochs);
  EXPECT_EQ(a.value_estimate, -a.l2.back());
  EXPECT_EQ(a.terminal_samples.rows(), c.sim.paths);
  EXPECT_EQ(a.state.target_samples.rows(), 10 * c.batch_size);
  EXPECT_EQ(a.l1, b.l1);
  EXPECT_EQ(a.l2, b.l2);
  EXPECT_TRUE(std::ranges::equal(a.terminal_samples.values(), b.terminal_samples.values()));
}

TEST(TrainDual, ZeroEpochs) {
  auto c = small_config();
  c.epochs = 0;
  const auto r = dual::train_dual(c);
  EXPECT_TRUE(r.l1.empty());
  EXPECT_EQ(r.value_estimate, 0.0);
  EXPECT_EQ(r.terminal_samples.rows(), c.sim.paths);
}

TEST(Snapshots, EpochSchedule) {
  auto c = small_config();
  c.epochs = 100;
  EXPECT_EQ(dual::snapshot_epochs(c), std::vector<std::size_t>{99});
  c.average_fraction = 0.5;
  c.average_snapshots = 5;
  EXPECT_EQ(dual::snapshot_epochs(c), (std::vector<std::size_t>{59, 69, 79, 89, 99}));
  c.average_snapshots = 500;
  EXPECT_EQ(dual::snapshot_epochs(c).size(), 50u);
  EXPECT_EQ(dual::snapshot_epochs(c).front(), 50u);
  c.epochs = 0;
  EXPECT_TRUE(dual::snapshot_epochs(c).empty());
}

TEST(Snapshots, AveragedSamplesMixSnapshots) {
  auto c = small_config();
  c.epochs = 6;
  const auto last = dual::train_dual(c);
  EXPECT_TRUE(std::ranges::equal(last.terminal_samples.values(), last.last_iterate_samples.values()));

  c.average_fraction = 0.5;
  c.average_snapshots = 3;
  const auto avg = dual::train_dual(c);
  EXPECT_EQ(avg.snapshot_epochs, (std::vector<std::size_t>{3, 4, 5}));
  EXPECT_EQ(avg.terminal_samples.rows(), c.sim.paths);
  EXPECT_EQ(avg.l2, last.l2);
  EXPECT_TRUE(std::ranges::equal(avg.last_iterate_samples.values(), last.last_iterate_samples.values()));
  EXPECT_FALSE(std::ranges::equal(avg.terminal_samples.values(), last.terminal_samples.values()));
}

TEST(Refresh, UsesUpdatedGenerator) {
  auto c = small_config();
  auto state = dual::init_dual(c);
  const auto dw = increments(c, 21);
  auto one = dual::phase_one(state, c, dw);
  const auto ab_after = state.ab.nets.front();
  const Tensor stale = one.terminal;
  dual::refresh_batch(state, c, dw, one);
  EXPECT_TRUE(state.ab.nets.front() == ab_after);
  EXPECT_FALSE(std::ranges::equal(stale.values(), one.terminal.values()));

  sde::SimConfig sc = c.sim;
  sc.paths = dw.paths;
  Tape tape;
  auto batch = sde::simulate(tape, sde::bind(tape, state.ab, false), sc, dw);
  EXPECT_TRUE(std::ranges::equal(batch.terminal().value().values(), one.terminal.values()));
  EXPECT_EQ(sde::running_cost(batch, c.cost).value().item(), one.running_cost);

  c.refresh_terminal = true;
  c.epochs = 3;
  const auto a = dual::train_dual(c), b = dual::train_dual(c);
  EXPECT_EQ(a.l2, b.l2);
  // Refreshing changes only what Phi sees, so the first Phase-one loss agrees.
  c.refresh_terminal = false;
  const auto plain = dual::train_dual(c);
  EXPECT_EQ(plain.l1.front(), a.l1.front());
  EXPECT_NE(plain.l2.front(), a.l2.front());
}

TEST(Optimistic, FirstStepDoublesThenCorrects) {
  const auto base = small_config();
  auto c = base;
  c.optimistic = true;
  auto plain = dual::init_dual(base);
  auto opt = dual::init_dual(c);
  const auto start = plain.ab.nets.front();
  const auto dw = increments(c, 31);
  dual::phase_one(plain, base, dw);
  dual::phase_one(opt, c, dw);
  const auto& w0 = start.layers[0].weight;
  const auto& wp = plain.ab.nets.front().layers[0].weight;
  const auto& wo = opt.ab.nets.front().layers[0].weight;
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_NEAR(wo[i] - w0[i], 2.0 * (wp[i] - w0[i]), 1e-12);
  // The stored step is the plain Adam step.
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_NEAR(opt.last_step_ab.layers[0].weight[i], wp[i] - w0[i], 1e-12);

  const auto phi_before = opt.phi;
  const auto one = dual::phase_one(opt, c, increments(c, 32));
  dual::phase_two(opt, c, one);
  EXPECT_FALSE(opt.phi == phi_before);
  c.epochs = 3;
  EXPECT_EQ(dual::train_dual(c).l2, dual::train_dual(c).l2);
}

TEST(TrainDual, TargetSampleCount) {
  auto c = small_config();
  c.target_samples = 123;
  EXPECT_EQ(dual::init_dual(c).target_samples.rows(), 123u);
}

TEST(TrainDual, CentredPhiSeesStandardisedInput) {
  auto c = small_config();
  c.centre_phi_input = false;
  const auto raw = dual::init_dual(c);
  c.centre_phi_input = true;
  const auto centred = dual::init_dual(c);
  EXPECT_TRUE(std::ranges::equal(raw.target_samples.values(), centred.target_samples.values()));

  const auto m = column_moments(raw.target_samples);
  Rng rng(12);
  const Tensor x = c.target.sample(rng, 50);
  Tensor z = x;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t j = 0; j < x.cols(); ++j) z(r, j) = (x(r, j) - m.first[j]) / m.second[j];
  const Tensor a = nn::forward_mlp(centred.phi, x), b = nn::forward_mlp(raw.phi, z);
  for (std::size_t r = 0; r < x.rows(); ++r) EXPECT_NEAR(a(r, 0), b(r, 0), 1e-12 * (1.0 + std::abs(b(r, 0))));
}

TEST(TrainDual, InvalidConfigs) {
  auto c = small_config();
  c.sim.arch = sde::ArchMode::PerStepBank;
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.beta1 = 1.0;
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.lr_phi = 0.0;
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.cost = sde::DiffusionTarget{0.1};
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.cost = sde::ControlShiftSq{};
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.target = density::TargetSpec::gaussian({6.0}, {1.0});
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.average_fraction = 1.0;
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
  c = small_config();
  c.average_snapshots = 0;
  EXPECT_THROW(dual::init_dual(c), std::invalid_argument);
}

TEST(LossCsv, Layout) {
  auto c = small_config();
  c.epochs = 3;
  const auto r = dual::train_dual(c);
  const auto file = std::filesystem::temp_directory_path() / "smot_loss_dual.csv";
  dual::write_loss_csv(file, r);
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epoch,L1,L2");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 3u);
  std::filesystem::remove(file);
}

}  // namespace
}  // namespace smot
