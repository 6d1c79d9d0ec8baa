#include "smot/dual.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

#include "smot/io.hpp"
#include "smot/primal.hpp"

namespace smot::dual {

using ad::Tensor;
using ad::Var;

void DualConfig::validate() const {
  sim.validate();
  if (target.empty()) throw std::invalid_argument("dual: target distribution missing");
  if (target.dim() != sim.dim) throw std::invalid_argument("dual: target dimension differs from state dimension");
  if (batch_size == 0) throw std::invalid_argument("dual: batch_size must be >= 1");
  if (!(lr_ab > 0.0) || !(lr_phi > 0.0)) throw std::invalid_argument("dual: learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw std::invalid_argument("dual: Adam betas must lie in [0, 1)");
  if (std::holds_alternative<sde::ControlShiftSq>(cost))
    throw std::invalid_argument("dual: ControlShiftSq applies to portfolio runs only");
  if (std::holds_alternative<sde::DiffusionTarget>(cost) && sim.dim != 1)
    throw std::invalid_argument("dual: DiffusionTarget needs d = 1");
  if (!(average_fraction >= 0.0 && average_fraction < 1.0))
    throw std::invalid_argument("dual: average_fraction must lie in [0, 1)");
  if (average_snapshots == 0) throw std::invalid_argument("dual: average_snapshots must be >= 1");
  ab_net.validate();
  phi_net.validate();
}

namespace {

void centre_first_layer(nn::MlpParams& phi, const Tensor& samples) {
  const std::size_t n = samples.rows(), d = samples.cols();
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double sq = 0.0;
    for (std::size_t r = 0; r < n; ++r) mean[i] += samples(r, i);
    mean[i] /= double(n);
    for (std::size_t r = 0; r < n; ++r) sq += (samples(r, i) - mean[i]) * (samples(r, i) - mean[i]);
    sd[i] = n > 1 ? std::sqrt(sq / double(n - 1)) : 0.0;
  }
  nn::standardise_inputs(phi, mean, sd);
}

nn::MlpParams zeros_like(const nn::MlpParams& p) {
  nn::MlpParams z = p;
  for (auto& layer : z.layers) {
    std::fill(layer.weight.values().begin(), layer.weight.values().end(), 0.0);
    std::fill(layer.bias.values().begin(), layer.bias.values().end(), 0.0);
  }
  return z;
}

void extrapolate(ad::Tensor& param, const ad::Tensor& before, ad::Tensor& last) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double step = param[i] - before[i];
    param[i] += step - last[i];
    last[i] = step;
  }
}

// Adam step followed, if requested, by the optimistic correction u_t - u_{t-1}.
void player_step(nn::MlpParams& params, const nn::MlpGrads& grads, nn::AdamState& adam, nn::MlpParams& last,
                 bool optimistic) {
  if (!optimistic) {
    nn::adam_step(params, grads, adam);
    return;
  }
  const nn::MlpParams before = params;
  nn::adam_step(params, grads, adam);
  for (std::size_t j = 0; j < params.layers.size(); ++j) {
    extrapolate(params.layers[j].weight, before.layers[j].weight, last.layers[j].weight);
    extrapolate(params.layers[j].bias, before.layers[j].bias, last.layers[j].bias);
  }
}

}  // namespace

DualState init_dual(const DualConfig& c) {
  c.validate();
  const std::size_t d = c.sim.dim;
  nn::MlpConfig ab = c.ab_net;
  ab.input_dim = sde::network_input_dim(c.sim.arch, d);
  ab.output_dim = d + d * d;
  nn::MlpConfig phi = c.phi_net;
  phi.input_dim = d;
  phi.output_dim = 1;

  Rng ab_rng = make_rng(c.seed, "init");
  Rng phi_rng = make_rng(c.seed, "init-phi");
  Rng target_rng = make_rng(c.seed, "target");
  DualState s;
  s.ab = sde::make_bank(c.sim.arch, c.sim.steps, ab, ab_rng);
  s.phi = nn::init_mlp(phi, phi_rng);
  s.target_samples = c.target.sample(target_rng, c.effective_target_samples());
  if (c.centre_phi_input) centre_first_layer(s.phi, s.target_samples);
  if (s.ab.nets.size() != 1) throw std::invalid_argument("dual: the AB-generator must be a single merged network");
  s.adam_ab = nn::make_adam(s.ab.nets.front(), c.lr_ab, c.beta1, c.beta2);
  s.adam_phi = nn::make_adam(s.phi, c.lr_phi, c.beta1, c.beta2);
  s.last_step_ab = zeros_like(s.ab.nets.front());
  s.last_step_phi = zeros_like(s.phi);
  return s;
}

Var mc_integral_phi(const nn::MlpParams& phi, const nn::MlpBinding& binding, Var samples) {
  return ad::mean_all(nn::forward_mlp(phi, binding, samples));
}

double mc_integral_phi(const nn::MlpParams& phi, const Tensor& samples) {
  ad::Tape tape;
  return mc_integral_phi(phi, nn::bind(tape, phi, false), tape.constant(samples)).value().item();
}

PhaseOne phase_one(DualState& state, const DualConfig& c, const sde::Increments& dw) {
  sde::SimConfig sc = c.sim;
  sc.paths = dw.paths;
  ad::Tape tape;
  const auto ab = sde::bind(tape, state.ab, true);
  const auto phi = nn::bind(tape, state.phi, false);
  try {
    auto batch = sde::simulate(tape, ab, sc, dw);
    Var cost = sde::running_cost(batch, c.cost);
    Var l1 = ad::sub(cost, mc_integral_phi(state.phi, phi, batch.terminal()));
    const auto grads = tape.backward(l1);
    player_step(state.ab.nets.front(), nn::collect_grads(grads, ab.bindings.front()), state.adam_ab,
                state.last_step_ab, c.optimistic);
    return {l1.value().item(), cost.value().item(), batch.terminal().value()};
  } catch (const ad::NonFiniteError& e) {
    throw sde::DivergenceError(std::string("dual phase one: ") + e.what());
  }
}

Var loss_l2(const nn::MlpParams& phi, const nn::MlpBinding& binding, Var terminal, Var target, double running_cost) {
  Var gap = ad::sub(mc_integral_phi(phi, binding, terminal), mc_integral_phi(phi, binding, target));
  return ad::add(gap, terminal.tape->constant(Tensor::scalar(-running_cost)));
}

double phase_two(DualState& state, const DualConfig& c, const PhaseOne& batch) {
  ad::Tape tape;
  const auto phi = nn::bind(tape, state.phi, c.train_phi);
  try {
    Var l2 = loss_l2(state.phi, phi, tape.constant(batch.terminal), tape.constant(state.target_samples),
                     batch.running_cost);
    if (c.train_phi) {
      const auto grads = tape.backward(l2);
      player_step(state.phi, nn::collect_grads(grads, phi), state.adam_phi, state.last_step_phi, c.optimistic);
    }
    return l2.value().item();
  } catch (const ad::NonFiniteError& e) {
    throw sde::DivergenceError(std::string("dual phase two: ") + e.what());
  }
}

std::vector<std::size_t> snapshot_epochs(const DualConfig& c) {
  if (c.epochs == 0) return {};
  const auto window = std::size_t(std::floor(c.average_fraction * double(c.epochs)));
  if (window == 0) return {c.epochs - 1};
  const std::size_t count = std::min(c.average_snapshots, window);
  std::vector<std::size_t> out;
  // Evenly spaced over the window, the last one at the final epoch.
  for (std::size_t j = 0; j < count; ++j) out.push_back(c.epochs - 1 - (count - 1 - j) * window / count);
  return out;
}

void refresh_batch(const DualState& state, const DualConfig& c, const sde::Increments& dw, PhaseOne& batch) {
  sde::SimConfig sc = c.sim;
  sc.paths = dw.paths;
  ad::Tape tape;
  try {
    auto paths = sde::simulate(tape, sde::bind(tape, state.ab, false), sc, dw);
    batch.running_cost = sde::running_cost(paths, c.cost).value().item();
    batch.terminal = paths.terminal().value();
  } catch (const ad::NonFiniteError& e) {
    throw sde::DivergenceError(std::string("dual refresh: ") + e.what());
  }
}

DualReport train_dual(const DualConfig& c) {
  const auto start = std::chrono::steady_clock::now();
  DualReport report;
  report.state = init_dual(c);
  report.snapshot_epochs = snapshot_epochs(c);
  std::vector<sde::NetworkBank> snapshots;
  for (std::size_t epoch = 0; epoch < c.epochs; ++epoch) {
    Rng rng = make_rng(c.seed, "increments", epoch);
    const auto dw = sde::sample_increments(rng, c.sim.steps, c.batch_size, c.sim.dim, c.sim.dt());
    PhaseOne one = phase_one(report.state, c, dw);
    report.l1.push_back(one.l1);
    if (c.refresh_terminal) refresh_batch(report.state, c, dw, one);
    report.l2.push_back(phase_two(report.state, c, one));
    report.epochs_completed = epoch + 1;
    if (std::binary_search(report.snapshot_epochs.begin(), report.snapshot_epochs.end(), epoch))
      snapshots.push_back(report.state.ab);
  }
  if (!report.l2.empty()) report.value_estimate = -report.l2.back();
  Rng final_rng = make_rng(c.seed, "final");
  report.last_iterate_samples =
      primal::simulate_terminal(report.state.ab, c.sim, c.sim.paths, c.batch_size, final_rng);
  if (snapshots.size() <= 1) {
    report.terminal_samples = report.last_iterate_samples;
  } else {
    const std::size_t k = snapshots.size(), d = c.sim.dim;
    report.terminal_samples = Tensor(c.sim.paths, d);
    std::size_t row = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t share = c.sim.paths / k + (j < c.sim.paths % k ? 1 : 0);
      if (share == 0) continue;
      Rng rng = make_rng(c.seed, "final-snapshot", j);
      const Tensor part = primal::simulate_terminal(snapshots[j], c.sim, share, c.batch_size, rng);
      std::copy(part.values().begin(), part.values().end(), report.terminal_samples.values().begin() + std::ptrdiff_t(row * d));
      row += share;
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

void write_loss_csv(const std::filesystem::path& path, const DualReport& report) {
  io::CsvWriter w(path, {"epoch", "L1", "L2"});
  for (std::size_t e = 0; e < report.l1.size(); ++e) {
    w.cell(e + 1).cell(report.l1[e]).cell(report.l2[e]);
    w.end_row();
  }
}

}  // namespace smot::dual
