#include "smot/sde.hpp"

#include <array>
#include <cmath>

#include "smot/io.hpp"

namespace smot::sde {

using ad::Tensor;
using ad::Var;

void SimConfig::validate() const {
  if (dim == 0) throw std::invalid_argument("SimConfig: dim must be >= 1");
  if (steps == 0) throw std::invalid_argument("SimConfig: steps must be >= 1");
  if (paths == 0) throw std::invalid_argument("SimConfig: paths must be >= 1");
  if (x0.size() != dim) throw std::invalid_argument("SimConfig: x0 must have dim entries");
}

Increments sample_increments(Rng& rng, std::size_t steps, std::size_t paths, std::size_t dim, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("sample_increments: dt must be positive");
  std::normal_distribution<double> normal(0.0, std::sqrt(dt));
  Increments out{dim, paths, {}};
  out.per_step.reserve(steps);
  for (std::size_t n = 0; n < steps; ++n) {
    Tensor dw(paths, dim);
    for (double& v : dw.values()) v = normal(rng);
    out.per_step.push_back(std::move(dw));
  }
  return out;
}

std::size_t NetworkBank::parameter_count() const {
  std::size_t n = 0;
  for (const auto& net : nets) n += net.parameter_count();
  return n;
}

std::size_t network_input_dim(ArchMode arch, std::size_t state_dim) {
  return arch == ArchMode::Merged ? state_dim + 1 : state_dim;
}

NetworkBank make_bank(ArchMode arch, std::size_t steps, const nn::MlpConfig& net, Rng& rng) {
  NetworkBank bank{arch, {}};
  const std::size_t count = arch == ArchMode::Merged ? 1 : steps;
  for (std::size_t n = 0; n < count; ++n) bank.nets.push_back(nn::init_mlp(net, rng));
  return bank;
}

BoundBank bind(ad::Tape& tape, const NetworkBank& bank, bool trainable) {
  BoundBank b{&bank, {}};
  for (const auto& net : bank.nets) b.bindings.push_back(nn::bind(tape, net, trainable));
  return b;
}

Var BoundBank::evaluate(std::size_t step, std::size_t steps, Var state) const {
  if (bank->arch == ArchMode::Merged) {
    const Tensor time(state.rows(), 1, double(step) / double(steps));
    const std::array<Var, 2> parts{state, state.tape->constant(time)};
    return nn::forward_mlp(bank->nets.front(), bindings.front(), ad::concat_columns(parts));
  }
  return nn::forward_mlp(bank->nets.at(step), bindings.at(step), state);
}

namespace {

// Sums row-major d x d blocks against the increments: (A dW)_i = sum_j A_ij dW_j.
Var apply_root(ad::Tape& tape, Var root, const Tensor& dw, std::size_t d) {
  if (d == 1) return ad::mul(root, tape.constant(dw));
  const std::size_t m = dw.rows();
  Tensor repeated(m, d * d);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) repeated(r, i * d + j) = dw(r, j);
  Tensor reduce(d * d, d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) reduce(i * d + j, i) = 1.0;
  return ad::matmul(ad::mul(root, tape.constant(std::move(repeated))), tape.constant(std::move(reduce)));
}

}  // namespace

PathBatch simulate(ad::Tape& tape, const BoundBank& nets, const SimConfig& config, const Increments& dw) {
  config.validate();
  const std::size_t d = config.dim;
  const std::size_t steps = config.steps;
  const std::size_t expected_nets = config.arch == ArchMode::Merged ? 1 : steps;
  if (nets.bank->arch != config.arch || nets.bank->nets.size() != expected_nets)
    throw std::invalid_argument("simulate: network bank does not match the architecture mode");
  if (dw.steps() != steps || dw.dim != d) throw ad::ShapeError("simulate: increments do not match config");

  const std::size_t m = dw.paths;
  const double dt = config.dt();
  PathBatch batch;
  batch.dim = d;
  batch.dt = dt;
  batch.increments = dw;

  Tensor x0(m, d);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) x0(r, c) = config.x0[c];

  try {
    Var x = tape.constant(std::move(x0));
    batch.states.push_back(x);
    for (std::size_t n = 0; n < steps; ++n) {
      const nn::SplitOutput out = nn::split_output(nets.evaluate(n, steps, x), d);
      x = ad::add(ad::add(x, ad::scale(out.drift, dt)), apply_root(tape, out.root, dw.per_step[n], d));
      batch.drifts.push_back(out.drift);
      batch.roots.push_back(out.root);
      batch.states.push_back(x);
    }
  } catch (const ad::NonFiniteError& e) {
    throw DivergenceError(std::string("simulation diverged: ") + e.what());
  }
  return batch;
}

namespace {

Var shifted_square_sum(Var v, double shift) {
  ad::Tape& tape = *v.tape;
  return ad::sum_all(ad::square(ad::add(v, tape.constant(Tensor(1, v.cols(), -shift)))));
}

void ensure_diffusions(PathBatch& batch) {
  if (!batch.diffusions.empty()) return;
  if (batch.roots.empty()) throw std::invalid_argument("running_cost: batch carries no diffusion information");
  for (Var root : batch.roots) batch.diffusions.push_back(nn::diffusion_from_root(root, batch.dim));
}

}  // namespace

Var running_cost(PathBatch& batch, const CostSpec& cost) {
  const std::size_t steps = batch.states.size() - 1;
  std::vector<Var> terms;
  terms.reserve(steps);

  if (std::holds_alternative<DiffusionTarget>(cost) && batch.dim != 1)
    throw std::invalid_argument("running_cost: DiffusionTarget is defined for d = 1 only");
  if (std::holds_alternative<ControlShiftSq>(cost) && batch.controls.empty())
    throw std::invalid_argument("running_cost: ControlShiftSq needs control records");
  if (std::holds_alternative<DiffusionTarget>(cost) || std::holds_alternative<DriftPlusDiffNormSq>(cost))
    ensure_diffusions(batch);

  try {
    for (std::size_t n = 0; n < steps; ++n) {
      Var term = std::visit(
          [&](const auto& c) -> Var {
            using T = std::decay_t<decltype(c)>;
            if constexpr (std::is_same_v<T, DriftNormSq>) {
              return ad::sum_all(ad::square(batch.drifts[n]));
            } else if constexpr (std::is_same_v<T, DiffusionTarget>) {
              return shifted_square_sum(batch.diffusions[n], c.target);
            } else if constexpr (std::is_same_v<T, DriftPlusDiffNormSq>) {
              return ad::add(ad::sum_all(ad::square(batch.drifts[n])), ad::sum_all(ad::square(batch.diffusions[n])));
            } else {
              return shifted_square_sum(batch.controls[n], c.shift);
            }
          },
          cost);
      terms.push_back(term);
    }
    Var total = terms.front();
    for (std::size_t n = 1; n < terms.size(); ++n) total = ad::add(total, terms[n]);
    return ad::scale(total, batch.dt / double(batch.paths()));
  } catch (const ad::NonFiniteError& e) {
    throw DivergenceError(std::string("running cost diverged: ") + e.what());
  }
}

void write_paths_csv(const std::filesystem::path& path, const PathBatch& batch) {
  std::vector<std::string> header{"path", "step"};
  for (auto& c : io::numbered_columns("x_", batch.dim)) header.push_back(c);
  io::CsvWriter w(path, header);
  const std::size_t m = batch.paths();
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t n = 0; n < batch.states.size(); ++n) {
      const Tensor& x = batch.states[n].value();
      w.cell(p).cell(n);
      for (std::size_t c = 0; c < batch.dim; ++c) w.cell(x(p, c));
      w.end_row();
    }
  }
}

}  // namespace smot::sde
