#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "smot/sde.hpp"
#include "test_support.hpp"

using namespace smot;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

// Bank of affine networks with zero weights, so every output row is `bias`.
sde::NetworkBank constant_bank(sde::ArchMode arch, std::size_t steps, std::size_t d, std::vector<double> bias) {
  nn::MlpConfig cfg;
  cfg.input_dim = sde::network_input_dim(arch, d);
  cfg.output_dim = d + d * d;
  Rng rng(0);
  auto bank = sde::make_bank(arch, steps, cfg, rng);
  for (auto& net : bank.nets) {
    net.layers[0].weight = Tensor(cfg.input_dim, cfg.output_dim, 0.0);
    net.layers[0].bias = Tensor::row(bias);
  }
  return bank;
}

sde::SimConfig sim(std::size_t d, std::size_t steps, std::size_t paths, std::vector<double> x0,
                   sde::ArchMode arch = sde::ArchMode::PerStepBank) {
  sde::SimConfig c;
  c.dim = d;
  c.steps = steps;
  c.paths = paths;
  c.x0 = std::move(x0);
  c.arch = arch;
  return c;
}

}  // namespace

TEST(Increments, MomentsMatchBrownianScaling) {
  Rng rng(1);
  const double dt = 0.01;
  const auto dw = sde::sample_increments(rng, 10, 100000, 1, dt);
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& t : dw.per_step)
    for (double v : t.values()) {
      sum += v;
      sq += v * v;
      ++n;
    }
  ASSERT_EQ(n, 1000000u);
  const double mean = sum / double(n);
  const double var = sq / double(n) - mean * mean;
  EXPECT_LT(std::abs(mean), 4 * std::sqrt(dt / 1e6));
  EXPECT_LT(std::abs(var / dt - 1), 0.01);
}

TEST(Increments, Deterministic) {
  Rng a(7), b(7);
  const auto x = sde::sample_increments(a, 3, 5, 2, 0.1);
  const auto y = sde::sample_increments(b, 3, 5, 2, 0.1);
  for (std::size_t n = 0; n < 3; ++n) EXPECT_EQ(x.per_step[n], y.per_step[n]);
}

TEST(Increments, RejectsNonPositiveStep) {
  Rng rng(1);
  EXPECT_THROW(sde::sample_increments(rng, 2, 2, 1, 0.0), std::invalid_argument);
}

TEST(Simulate, FrozenDynamicsStayAtStart) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 5, 2, {0, 0, 0, 0, 0, 0});
  const auto cfg = sim(2, 5, 7, {1.5, -2.0});
  Rng rng(2);
  const auto dw = sde::sample_increments(rng, 5, 7, 2, cfg.dt());
  Tape tape;
  const auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, dw);
  ASSERT_EQ(batch.states.size(), 6u);
  for (std::size_t r = 0; r < 7; ++r) {
    EXPECT_EQ(batch.terminal().value()(r, 0), 1.5);
    EXPECT_EQ(batch.terminal().value()(r, 1), -2.0);
  }
}

TEST(Simulate, UnitDriftMovesByOne) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 4, 1, {1.0, 0.0});
  const auto cfg = sim(1, 4, 3, {0.25});
  Rng rng(2);
  Tape tape;
  const auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 4, 3, 1, cfg.dt()));
  for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(batch.terminal().value()(r, 0), 1.25);
}

TEST(Simulate, ConstantRootGivesBrownianVariance) {
  const double a = 0.7;
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 8, 1, {0.0, a});
  const auto cfg = sim(1, 8, 100000, {0.0});
  Rng rng(3);
  Tape tape;
  const auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 8, 100000, 1, cfg.dt()));
  double sum = 0, sq = 0;
  for (double v : batch.terminal().value().values()) {
    sum += v;
    sq += v * v;
  }
  const double mean = sum / 1e5;
  const double var = sq / 1e5 - mean * mean;
  EXPECT_LT(std::abs(var / (a * a) - 1), 0.05);
}

TEST(Simulate, TerminalMeanWithConstantCoefficients) {
  // B = (0.5, -1), A = [[0.3, 0], [0.2, 0.4]], so the diffusion is [[0.09, 0.06], [0.06, 0.2]].
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 10, 2, {0.5, -1.0, 0.3, 0.0, 0.2, 0.4});
  const std::size_t m = 20000;
  const auto cfg = sim(2, 10, m, {1.0, 2.0});
  Rng rng(4);
  Tape tape;
  const auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 10, m, 2, cfg.dt()));
  const Tensor& x = batch.terminal().value();
  const double expected[2] = {1.5, 1.0};
  const double diffusion[2] = {0.09, 0.2};
  double cov = 0, mean[2] = {0, 0};
  for (std::size_t r = 0; r < m; ++r)
    for (int c = 0; c < 2; ++c) mean[c] += x(r, c) / double(m);
  for (std::size_t r = 0; r < m; ++r) cov += (x(r, 0) - mean[0]) * (x(r, 1) - mean[1]) / double(m - 1);
  for (int c = 0; c < 2; ++c) EXPECT_LE(std::abs(mean[c] - expected[c]), 4 * std::sqrt(diffusion[c] / double(m)));
  EXPECT_NEAR(cov, 0.06, 0.01);
}

TEST(Simulate, ZeroRootPathsAreIdentical) {
  Rng rng(5);
  nn::MlpConfig cfg{2, {6}, 6};
  auto bank = sde::make_bank(sde::ArchMode::PerStepBank, 3, cfg, rng);
  for (auto& net : bank.nets) {
    auto& out = net.layers.back();
    for (std::size_t r = 0; r < out.weight.rows(); ++r)
      for (std::size_t c = 2; c < 6; ++c) out.weight(r, c) = 0.0;
  }
  const auto sc = sim(2, 3, 6, {0.3, -0.1});
  Tape tape;
  const auto batch = sde::simulate(tape, sde::bind(tape, bank), sc, sde::sample_increments(rng, 3, 6, 2, sc.dt()));
  const Tensor& x = batch.terminal().value();
  for (std::size_t r = 1; r < 6; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(x(r, c), x(0, c));
}

TEST(Simulate, MergedModeFeedsNormalisedTime) {
  // Drift equals the time input, so X_N = x0 + sum_n (n/N) dt = x0 + (N-1)/(2N).
  nn::MlpConfig cfg{2, {}, 2};
  Rng rng(6);
  auto bank = sde::make_bank(sde::ArchMode::Merged, 4, cfg, rng);
  ASSERT_EQ(bank.nets.size(), 1u);
  bank.nets[0].layers[0].weight = Tensor::from_rows({{0, 0}, {1, 0}});
  bank.nets[0].layers[0].bias = Tensor(1, 2, 0.0);
  const auto sc = sim(1, 4, 2, {0.0}, sde::ArchMode::Merged);
  Tape tape;
  const auto batch = sde::simulate(tape, sde::bind(tape, bank), sc, sde::sample_increments(rng, 4, 2, 1, sc.dt()));
  EXPECT_DOUBLE_EQ(batch.terminal().value()(0, 0), 3.0 / 8.0);
}

TEST(Simulate, MismatchedInputsThrow) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 4, 1, {0, 0});
  Rng rng(1);
  Tape tape;
  const auto bound = sde::bind(tape, bank);
  EXPECT_THROW(sde::simulate(tape, bound, sim(1, 5, 2, {0.0}), sde::sample_increments(rng, 5, 2, 1, 0.2)),
               std::invalid_argument);
  EXPECT_THROW(sde::simulate(tape, bound, sim(1, 4, 2, {0.0}), sde::sample_increments(rng, 3, 2, 1, 0.25)),
               ad::ShapeError);
  EXPECT_THROW(sde::simulate(tape, bound, sim(1, 4, 2, {0.0, 1.0}), sde::sample_increments(rng, 4, 2, 1, 0.25)),
               std::invalid_argument);
}

TEST(Simulate, DivergenceIsReported) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 2, 1, {1e308, 0.0});
  Rng rng(1);
  Tape tape;
  const auto cfg = sim(1, 2, 2, {1e308});
  EXPECT_THROW(sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 2, 2, 1, 0.5)),
               sde::DivergenceError);
}

TEST(RunningCost, ZeroDriftCostsNothing) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 3, 2, {0, 0, 1, 0, 0, 1});
  const auto cfg = sim(2, 3, 4, {0, 0});
  Rng rng(1);
  Tape tape;
  auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 3, 4, 2, cfg.dt()));
  EXPECT_EQ(sde::running_cost(batch, sde::DriftNormSq{}).value().item(), 0.0);
}

TEST(RunningCost, ConstantDriftIntegratesOverUnitHorizon) {
  for (std::size_t steps : {1u, 4u, 7u}) {
    const auto bank = constant_bank(sde::ArchMode::PerStepBank, steps, 1, {2.0, 0.3});
    const auto cfg = sim(1, steps, 5, {0});
    Rng rng(1);
    Tape tape;
    auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, steps, 5, 1, cfg.dt()));
    EXPECT_NEAR(sde::running_cost(batch, sde::DriftNormSq{}).value().item(), 4.0, 1e-12);
  }
}

TEST(RunningCost, DiffusionTargetMet) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 3, 1, {0.4, std::sqrt(0.1)});
  const auto cfg = sim(1, 3, 5, {0});
  Rng rng(1);
  Tape tape;
  auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 3, 5, 1, cfg.dt()));
  EXPECT_NEAR(sde::running_cost(batch, sde::DiffusionTarget{0.1}).value().item(), 0.0, 1e-15);
}

TEST(RunningCost, DriftPlusDiffusionNorm) {
  // B = (1, 2), A = identity: |B|^2 + |AA^T|_F^2 = 5 + 2 over the unit horizon.
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 2, 2, {1, 2, 1, 0, 0, 1});
  const auto cfg = sim(2, 2, 3, {0, 0});
  Rng rng(1);
  Tape tape;
  auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 2, 3, 2, cfg.dt()));
  EXPECT_NEAR(sde::running_cost(batch, sde::DriftPlusDiffNormSq{}).value().item(), 7.0, 1e-12);
}

TEST(RunningCost, UnsupportedCombinationsThrow) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 2, 2, {0, 0, 0, 0, 0, 0});
  const auto cfg = sim(2, 2, 3, {0, 0});
  Rng rng(1);
  Tape tape;
  auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 2, 3, 2, cfg.dt()));
  EXPECT_THROW(sde::running_cost(batch, sde::DiffusionTarget{0.1}), std::invalid_argument);
  EXPECT_THROW(sde::running_cost(batch, sde::ControlShiftSq{0.5}), std::invalid_argument);
}

TEST(RunningCost, ParameterGradientMatchesFiniteDifferences) {
  nn::MlpConfig cfg{2, {5}, 6};
  Rng rng(8);
  const auto base = sde::make_bank(sde::ArchMode::PerStepBank, 2, cfg, rng);
  const auto sc = sim(2, 2, 4, {0.2, -0.3});
  const auto dw = sde::sample_increments(rng, 2, 4, 2, sc.dt());

  auto loss_of = [&](const sde::NetworkBank& bank, bool grad, nn::MlpGrads* out) {
    Tape tape;
    const auto bound = sde::bind(tape, bank, grad);
    auto batch = sde::simulate(tape, bound, sc, dw);
    Var terminal = ad::sum_all(ad::square(batch.terminal()));
    Var loss = ad::add(sde::running_cost(batch, sde::DriftPlusDiffNormSq{}), terminal);
    if (out) *out = nn::collect_grads(tape.backward(loss), bound.bindings[0]);
    return loss.value().item();
  };

  nn::MlpGrads analytic;
  loss_of(base, true, &analytic);
  for (std::size_t j = 0; j < 2; ++j) {
    auto f = [&](const Tensor& w) {
      auto bank = base;
      bank.nets[0].layers[j].weight = w;
      return loss_of(bank, false, nullptr);
    };
    const Tensor numeric = ad::finite_diff_grad(f, base.nets[0].layers[j].weight, 1e-5);
    EXPECT_LT(fixtures::max_relative_error(analytic[j].weight, numeric), 1e-4) << "layer " << j;
  }
}

TEST(PathsCsv, HasHeaderAndOneRowPerPathStep) {
  const auto bank = constant_bank(sde::ArchMode::PerStepBank, 3, 2, {1, 0, 0, 0, 0, 0});
  const auto cfg = sim(2, 3, 2, {0, 0});
  Rng rng(1);
  Tape tape;
  auto batch = sde::simulate(tape, sde::bind(tape, bank), cfg, sde::sample_increments(rng, 3, 2, 2, cfg.dt()));
  const auto file = std::filesystem::temp_directory_path() / "smot_paths_test.csv";
  sde::write_paths_csv(file, batch);
  std::ifstream in(file);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "path,step,x_1,x_2");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2u * 4u);
  std::filesystem::remove(file);
}
