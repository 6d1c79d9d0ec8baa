#include "smot/primal.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

#include "smot/io.hpp"

namespace smot::primal {

using ad::Tensor;
using ad::Var;

double penalty_lambda(const PenaltySpec& p) {
  return std::visit([](const auto& v) { return v.lambda; }, p);
}

void PrimalConfig::validate(bool wealth_dynamics) const {
  sim.validate();
  if (target.empty()) throw std::invalid_argument("primal: target distribution missing");
  if (target.dim() != sim.dim) throw std::invalid_argument("primal: target dimension differs from state dimension");
  if (batch_size == 0 || batch_size > sim.paths) throw std::invalid_argument("primal: batch_size must lie in [1, paths]");
  if (!(lr > 0.0)) throw std::invalid_argument("primal: learning rate must be positive");
  if (!(penalty_lambda(penalty) >= 0.0)) throw std::invalid_argument("primal: penalty weight must be >= 0");
  if (std::holds_alternative<Wasserstein2>(penalty)) {
    if (sim.dim != 1) throw std::invalid_argument("primal: the Wasserstein penalty needs d = 1");
  } else {
    if (sim.dim > 2) throw std::invalid_argument("primal: grid penalties need d <= 2");
    if (batch_size < 2) throw std::invalid_argument("primal: grid penalties need batch_size >= 2");
    if (grid_points < 2) throw std::invalid_argument("primal: grid_points must be >= 2");
  }
  if (const auto* kl = std::get_if<KL>(&penalty); kl && !(kl->eps > 0.0))
    throw std::invalid_argument("primal: KL floor must be positive");
  if (!wealth_dynamics && std::holds_alternative<sde::ControlShiftSq>(cost))
    throw std::invalid_argument("primal: ControlShiftSq applies to portfolio runs only");
  if (std::holds_alternative<sde::DiffusionTarget>(cost) && sim.dim != 1)
    throw std::invalid_argument("primal: DiffusionTarget needs d = 1");
  net.validate();
}

TerminalPenalty::TerminalPenalty(const PenaltySpec& spec, const density::TargetSpec& target, std::size_t batch_size,
                                 std::size_t grid_points, double half_width_sd, std::size_t target_samples, Rng& rng)
    : spec_(spec), batch_size_(batch_size) {
  if (std::holds_alternative<Wasserstein2>(spec)) {
    quantiles_ = density::plotting_quantiles(target, batch_size);
    return;
  }
  std::vector<double> sd;
  for (double v : target.variance()) sd.push_back(std::sqrt(v));
  bandwidth_ = density::bandwidth_scott(sd, batch_size);
  grid_ = density::Grid::around(target, grid_points, half_width_sd);
  rho_bar_ = density::target_on_grid(target, *grid_, bandwidth_, target_samples, rng);
}

Var TerminalPenalty::evaluate(Var terminal) const {
  if (terminal.rows() != batch_size_) throw ad::ShapeError("TerminalPenalty: unexpected batch size");
  ad::Tape& tape = *terminal.tape;
  return std::visit(
      [&](const auto& p) -> Var {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, Wasserstein2>) {
          return density::penalty_w2(terminal, quantiles_, p.lambda);
        } else {
          Var rho = density::kde_on_grid(terminal, *grid_, bandwidth_);
          Var rho_bar = tape.constant(rho_bar_);
          if constexpr (std::is_same_v<T, SquaredL2>)
            return density::penalty_l2(rho, rho_bar, p.lambda, *grid_);
          else
            return density::penalty_kl(rho, rho_bar, p.lambda, *grid_, p.eps);
        }
      },
      spec_);
}

Tensor TerminalPenalty::empirical_density(const Tensor& samples) const {
  if (!grid_) throw std::logic_error("TerminalPenalty: no grid for this penalty");
  return density::kde_on_grid(samples, *grid_, bandwidth_);
}

Tensor simulate_terminal(const sde::NetworkBank& bank, const TrainingProblem& problem, const sde::SimConfig& sim,
                         std::size_t paths, std::size_t chunk, Rng& rng) {
  const std::size_t d = sim.dim;
  Tensor out(paths, d);
  for (std::size_t begin = 0; begin < paths; begin += chunk) {
    const std::size_t m = std::min(chunk, paths - begin);
    const auto dw = sde::sample_increments(rng, sim.steps, m, problem.noise_dim, sim.dt());
    ad::Tape tape;
    const auto batch = problem.simulate(tape, sde::bind(tape, bank, false), dw);
    if (problem.observe) problem.observe(batch, true);
    const Tensor& x = batch.terminal().value();
    std::copy(x.values().begin(), x.values().end(), out.values().begin() + std::ptrdiff_t(begin * d));
  }
  return out;
}

namespace {

TrainingProblem state_problem(const sde::SimConfig& sim) {
  TrainingProblem p;
  p.noise_dim = sim.dim;
  p.simulate = [sim](ad::Tape& tape, const sde::BoundBank& bound, const sde::Increments& dw) {
    sde::SimConfig sc = sim;
    sc.paths = dw.paths;
    return sde::simulate(tape, bound, sc, dw);
  };
  return p;
}

}  // namespace

Tensor simulate_terminal(const sde::NetworkBank& bank, const sde::SimConfig& sim, std::size_t paths,
                         std::size_t chunk, Rng& rng) {
  return simulate_terminal(bank, state_problem(sim), sim, paths, chunk, rng);
}

TrainReport train_with(const PrimalConfig& c, const nn::MlpConfig& net, const TrainingProblem& problem) {
  const auto start = std::chrono::steady_clock::now();
  Rng init_rng = make_rng(c.seed, "init");
  sde::NetworkBank bank = sde::make_bank(c.sim.arch, c.sim.steps, net, init_rng);
  if (c.centre_input) {
    const auto mean = c.target.mean();
    auto sd = c.target.variance();
    for (double& v : sd) v = std::sqrt(v);
    for (auto& p : bank.nets) nn::standardise_inputs(p, mean, sd);
  }
  std::vector<nn::AdamState> adam;
  for (const auto& p : bank.nets) adam.push_back(nn::make_adam(p, c.lr));

  Rng target_rng = make_rng(c.seed, "target");
  const std::size_t target_samples = c.target_kde_samples ? c.target_kde_samples : c.sim.paths;
  const TerminalPenalty penalty(c.penalty, c.target, c.batch_size, c.grid_points, c.grid_half_width_sd,
                                target_samples, target_rng);

  TrainReport report;
  const std::size_t batches = c.sim.paths / c.batch_size;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    Rng rng = make_rng(c.seed, "increments", epoch);
    double cost_sum = 0.0, penalty_sum = 0.0, total_sum = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto dw = sde::sample_increments(rng, c.sim.steps, c.batch_size, problem.noise_dim, c.sim.dt());
      ad::Tape tape;
      const auto bound = sde::bind(tape, bank, true);
      try {
        auto batch = problem.simulate(tape, bound, dw);
        if (problem.observe) problem.observe(batch, false);
        Var cost = sde::running_cost(batch, c.cost);
        Var pen = penalty.evaluate(batch.terminal());
        Var total = ad::add(cost, pen);
        const auto grads = tape.backward(total);
        for (std::size_t k = 0; k < bank.nets.size(); ++k)
          nn::adam_step(bank.nets[k], nn::collect_grads(grads, bound.bindings[k]), adam[k]);
        cost_sum += cost.value().item();
        penalty_sum += pen.value().item();
        total_sum += total.value().item();
      } catch (const ad::NonFiniteError& e) {
        throw sde::DivergenceError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
    }
    report.cost_part.push_back(cost_sum / double(batches));
    report.penalty_part.push_back(penalty_sum / double(batches));
    report.total.push_back(total_sum / double(batches));
    report.epochs_completed = epoch + 1;
  }

  Rng final_rng = make_rng(c.seed, "final");
  report.terminal_samples = simulate_terminal(bank, problem, c.sim, c.sim.paths, c.batch_size, final_rng);
  if (penalty.uses_grid()) {
    report.grid = penalty.grid();
    report.rho_empirical = penalty.empirical_density(report.terminal_samples);
    report.rho_target = penalty.target_density();
  }
  report.parameter_count = bank.parameter_count();
  report.networks = std::move(bank);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

namespace {

TrainReport run(const PrimalConfig& c, sde::ArchMode expected) {
  c.validate();
  if (c.sim.arch != expected) throw std::invalid_argument("primal: architecture mode does not match the trainer");
  const std::size_t d = c.sim.dim;
  nn::MlpConfig net = c.net;
  net.input_dim = sde::network_input_dim(c.sim.arch, d);
  net.output_dim = d + d * d;
  return train_with(c, net, state_problem(c.sim));
}

}  // namespace

TrainReport train_primal(const PrimalConfig& config) { return run(config, sde::ArchMode::PerStepBank); }

TrainReport train_primal_merged(const PrimalConfig& config) { return run(config, sde::ArchMode::Merged); }

void write_loss_csv(const std::filesystem::path& path, const TrainReport& report) {
  io::CsvWriter w(path, {"epoch", "cost_part", "penalty_part", "total"});
  for (std::size_t e = 0; e < report.total.size(); ++e) {
    w.cell(e + 1).cell(report.cost_part[e]).cell(report.penalty_part[e]).cell(report.total[e]);
    w.end_row();
  }
}

}  // namespace smot::primal
