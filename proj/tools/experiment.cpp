#include "experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "smot/io.hpp"
#include "smot/validate.hpp"

namespace smot::cli {

using nlohmann::json;

namespace {

constexpr const char* kModes[] = {"primal_bank", "primal_merged", "dual", "portfolio", "validate"};
constexpr std::size_t kDefaultDirections = 1000;

bool non_negative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

// Strict view of one JSON object: every key must be consumed before finish().
class Block {
 public:
  Block(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(where_ + ": " + what); }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    if (!has(key)) fail("missing key '" + key + "'");
    seen_.insert(key);
    return j_.at(key);
  }

  Block sub(const std::string& key) { return Block(raw(key), where_ + "." + key); }

  double number(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number()) fail("'" + key + "' must be a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) { return has(key) ? number(key) : fallback; }

  std::uint64_t count(const std::string& key) {
    const json& v = raw(key);
    if (!non_negative_integer(v)) fail("'" + key + "' must be a non-negative integer");
    return v.get<std::uint64_t>();
  }
  std::size_t count(const std::string& key, std::size_t fallback) { return has(key) ? count(key) : fallback; }

  bool flag(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_boolean()) fail("'" + key + "' must be a boolean");
    return v.get<bool>();
  }

  std::string text(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) fail("'" + key + "' must be a string");
    return v.get<std::string>();
  }
  std::string text(const std::string& key, const std::string& fallback) { return has(key) ? text(key) : fallback; }

  std::vector<double> numbers(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail("'" + key + "' must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) fail("'" + key + "' must be an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

  // Square matrix given as rows or as a flat row-major list.
  std::vector<double> matrix(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail("'" + key + "' must be a matrix");
    std::vector<double> out;
    if (!v.empty() && v.front().is_array()) {
      for (const auto& row : v) {
        if (!row.is_array() || row.size() != v.size()) fail("'" + key + "' must be square");
        for (const auto& e : row) {
          if (!e.is_number()) fail("'" + key + "' must hold numbers");
          out.push_back(e.get<double>());
        }
      }
      return out;
    }
    return numbers(key);
  }

  std::vector<std::size_t> counts(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail("'" + key + "' must be an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) {
      if (!non_negative_integer(e)) fail("'" + key + "' must be an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) fail("unknown key '" + key + "'");
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json matrix_json(const std::vector<double>& flat) {
  const auto d = std::size_t(std::lround(std::sqrt(double(flat.size()))));
  json rows = json::array();
  for (std::size_t i = 0; i < d; ++i)
    rows.push_back(std::vector<double>(flat.begin() + std::ptrdiff_t(i * d), flat.begin() + std::ptrdiff_t((i + 1) * d)));
  return rows;
}

sde::SimConfig parse_sim(Block b, bool with_arch) {
  sde::SimConfig s;
  s.dim = b.count("dim", 1);
  s.steps = b.count("steps", s.steps);
  s.paths = b.count("paths", s.paths);
  s.x0 = b.numbers("x0");
  if (with_arch) {
    const auto arch = b.text("arch", "per_step_bank");
    if (arch == "per_step_bank") s.arch = sde::ArchMode::PerStepBank;
    else if (arch == "merged") s.arch = sde::ArchMode::Merged;
    else b.fail("arch must be per_step_bank or merged");
  }
  b.finish();
  return s;
}

json sim_json(const sde::SimConfig& s, bool with_arch) {
  json j = {{"dim", s.dim}, {"steps", s.steps}, {"paths", s.paths}, {"x0", s.x0}};
  if (with_arch) j["arch"] = s.arch == sde::ArchMode::Merged ? "merged" : "per_step_bank";
  return j;
}

nn::MlpConfig parse_net(Block b) {
  nn::MlpConfig n;
  n.hidden = b.counts("hidden");
  n.leaky_slope = b.number("leaky_slope", n.leaky_slope);
  n.output_init_scale = b.number("output_init_scale", n.output_init_scale);
  b.finish();
  return n;
}

json net_json(const nn::MlpConfig& n) {
  return {{"hidden", n.hidden}, {"leaky_slope", n.leaky_slope}, {"output_init_scale", n.output_init_scale}};
}

sde::CostSpec parse_cost(Block b) {
  const auto kind = b.text("kind");
  sde::CostSpec out;
  if (kind == "drift_norm_sq") out = sde::DriftNormSq{};
  else if (kind == "drift_plus_diff_norm_sq") out = sde::DriftPlusDiffNormSq{};
  else if (kind == "diffusion_target") out = sde::DiffusionTarget{b.number("target", sde::DiffusionTarget{}.target)};
  else if (kind == "control_shift_sq") out = sde::ControlShiftSq{b.number("shift", sde::ControlShiftSq{}.shift)};
  else b.fail("unknown cost kind '" + kind + "'");
  b.finish();
  return out;
}

json cost_json(const sde::CostSpec& c) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, sde::DriftNormSq>) return {{"kind", "drift_norm_sq"}};
        else if constexpr (std::is_same_v<T, sde::DriftPlusDiffNormSq>) return {{"kind", "drift_plus_diff_norm_sq"}};
        else if constexpr (std::is_same_v<T, sde::DiffusionTarget>) return {{"kind", "diffusion_target"}, {"target", v.target}};
        else return {{"kind", "control_shift_sq"}, {"shift", v.shift}};
      },
      c);
}

primal::PenaltySpec parse_penalty(Block b) {
  const auto kind = b.text("kind");
  primal::PenaltySpec out;
  if (kind == "squared_l2") {
    out = primal::SquaredL2{b.number("lambda", primal::SquaredL2{}.lambda)};
  } else if (kind == "kl") {
    primal::KL kl;
    kl.lambda = b.number("lambda", kl.lambda);
    kl.eps = b.number("eps", kl.eps);
    out = kl;
  } else if (kind == "wasserstein2") {
    out = primal::Wasserstein2{b.number("lambda", primal::Wasserstein2{}.lambda)};
  } else {
    b.fail("unknown penalty kind '" + kind + "'");
  }
  b.finish();
  return out;
}

json penalty_json(const primal::PenaltySpec& p) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, primal::SquaredL2>) return {{"kind", "squared_l2"}, {"lambda", v.lambda}};
        else if constexpr (std::is_same_v<T, primal::KL>) return {{"kind", "kl"}, {"lambda", v.lambda}, {"eps", v.eps}};
        else return {{"kind", "wasserstein2"}, {"lambda", v.lambda}};
      },
      p);
}

density::TargetSpec parse_target_block(Block b) {
  const auto kind = b.text("kind");
  density::TargetSpec out;
  if (kind == "gaussian") {
    auto mean = b.numbers("mean");
    auto cov = b.matrix("cov");
    b.finish();
    out = density::TargetSpec::gaussian(std::move(mean), std::move(cov));
  } else if (kind == "mixture") {
    auto w = b.numbers("weights");
    auto m = b.numbers("means");
    auto s = b.numbers("stddevs");
    b.finish();
    out = density::TargetSpec::mixture(std::move(w), std::move(m), std::move(s));
  } else {
    b.fail("unknown target kind '" + kind + "'");
  }
  return out;
}

portfolio::MarketSpec parse_market(Block b) {
  portfolio::MarketSpec out;
  if (b.has("regimes")) {
    const json& list = b.raw("regimes");
    if (!list.is_array()) b.fail("'regimes' must be an array");
    std::vector<portfolio::MarketRegime> regimes;
    for (std::size_t i = 0; i < list.size(); ++i) {
      Block r(list[i], b.where() + ".regimes[" + std::to_string(i) + "]");
      portfolio::MarketRegime reg;
      reg.start = r.number("start");
      reg.mu = r.numbers("mu");
      reg.cov = r.matrix("cov");
      r.finish();
      regimes.push_back(std::move(reg));
    }
    b.finish();
    out = portfolio::MarketSpec::piecewise(std::move(regimes));
  } else {
    auto mu = b.numbers("mu");
    auto cov = b.matrix("cov");
    b.finish();
    out = portfolio::MarketSpec::constant(std::move(mu), std::move(cov));
  }
  return out;
}

// Keys shared by the primal and portfolio blocks.
void parse_primal_fields(Block& b, primal::PrimalConfig& c) {
  c.net = parse_net(b.sub("net"));
  c.cost = parse_cost(b.sub("cost"));
  c.penalty = parse_penalty(b.sub("penalty"));
  c.target = parse_target(b.raw("target"));
  c.epochs = b.count("epochs", c.epochs);
  c.batch_size = b.count("batch_size", c.batch_size);
  c.lr = b.number("lr", c.lr);
  c.grid_points = b.count("grid_points", c.grid_points);
  c.grid_half_width_sd = b.number("grid_half_width_sd", c.grid_half_width_sd);
  c.target_kde_samples = b.count("target_kde_samples", c.target_kde_samples);
  c.centre_input = b.flag("centre_input", c.centre_input);
}

json primal_fields_json(const primal::PrimalConfig& c) {
  return {{"net", net_json(c.net)},
          {"cost", cost_json(c.cost)},
          {"penalty", penalty_json(c.penalty)},
          {"target", to_json(c.target)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"grid_points", c.grid_points},
          {"grid_half_width_sd", c.grid_half_width_sd},
          {"target_kde_samples", c.target_kde_samples},
          {"centre_input", c.centre_input}};
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw io::IoError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
  if (!os) throw io::IoError("failed writing " + path.string());
}

json moments_json(const ad::Tensor& samples) {
  if (samples.rows() < 2) return json::object();
  const auto m = validate::empirical_moments(samples);
  return {{"mean", m.mean}, {"cov", matrix_json(m.cov)}};
}

// metrics.json, wasserstein_hist.csv and qq.csv for a sample set.
json write_metrics(const std::filesystem::path& dir, const ad::Tensor& samples, const density::TargetSpec& target,
                   std::size_t directions, std::uint64_t seed) {
  Rng rng = make_rng(seed, "metrics");
  const auto report = validate::compute_metrics(samples, target, directions, rng);
  validate::write_metrics_json(dir / "metrics.json", report, target);
  validate::write_wasserstein_hist_csv(dir / "wasserstein_hist.csv", report.affine);
  validate::write_qq_csv(dir / "qq.csv", report);
  json j = {{"directions", report.affine.empirical.size()}};
  if (!report.affine.empirical.empty()) {
    j["median_empirical"] = validate::median(report.affine.empirical);
    j["median_baseline"] = validate::median(report.affine.baseline);
  }
  return j;
}

struct ModeResult {
  json report;
  std::vector<std::string> files;
};

void add_grid(ModeResult& r, const std::filesystem::path& dir, const primal::TrainReport& t) {
  if (!t.grid) return;
  density::write_density_grid_csv(dir / "density_grid.csv", *t.grid, t.rho_empirical, t.rho_target);
  r.files.push_back("density_grid.csv");
}

json loss_summary(const primal::TrainReport& t) {
  json j = {{"epochs_completed", t.epochs_completed}, {"parameter_count", t.parameter_count}};
  if (!t.total.empty()) {
    j["first_total"] = t.total.front();
    j["final_total"] = t.total.back();
    j["final_cost_part"] = t.cost_part.back();
    j["final_penalty_part"] = t.penalty_part.back();
  }
  return j;
}

// Runner-only key carried inside a mode block; removed before the library parser sees it.
std::size_t take_directions(json& block, const std::string& mode) {
  if (!block.is_object() || !block.contains("metrics_directions")) return kDefaultDirections;
  json only = {{"metrics_directions", block.at("metrics_directions")}};
  block.erase("metrics_directions");
  Block b(only, mode);
  return b.count("metrics_directions");
}

ModeResult run_primal(const std::string& mode, const json& block, std::uint64_t seed,
                      const std::optional<std::size_t>& epochs, const std::filesystem::path& dir, json& resolved) {
  json stripped = block;
  const std::size_t directions = take_directions(stripped, mode);
  auto cfg = parse_primal(stripped, mode == "primal_merged" ? sde::ArchMode::Merged : sde::ArchMode::PerStepBank, seed);
  if (epochs) cfg.epochs = *epochs;
  resolved = to_json(cfg);
  resolved["metrics_directions"] = directions;

  const auto t = mode == "primal_merged" ? primal::train_primal_merged(cfg) : primal::train_primal(cfg);
  ModeResult r;
  primal::write_loss_csv(dir / "loss.csv", t);
  io::write_samples_csv(dir / "samples.csv", t.terminal_samples);
  nn::save_checkpoint(dir / "checkpoint.json", t.networks.nets);
  r.files = {"loss.csv", "samples.csv", "checkpoint.json"};
  add_grid(r, dir, t);
  r.report = loss_summary(t);
  r.report["terminal"] = moments_json(t.terminal_samples);
  r.report["metrics"] = write_metrics(dir, t.terminal_samples, cfg.target, directions, seed);
  r.files.insert(r.files.end(), {"metrics.json", "wasserstein_hist.csv", "qq.csv"});
  r.report["train_seconds"] = t.wall_seconds;
  return r;
}

ModeResult run_dual(const json& block, std::uint64_t seed, const std::optional<std::size_t>& epochs,
                    const std::filesystem::path& dir, json& resolved) {
  json stripped = block;
  const std::size_t directions = take_directions(stripped, "dual");
  auto cfg = parse_dual(stripped, seed);
  if (epochs) cfg.epochs = *epochs;
  resolved = to_json(cfg);
  resolved["metrics_directions"] = directions;

  const auto t = dual::train_dual(cfg);
  ModeResult r;
  dual::write_loss_csv(dir / "loss_dual.csv", t);
  io::write_samples_csv(dir / "samples.csv", t.terminal_samples);
  nn::save_checkpoint(dir / "checkpoint_ab.json", t.state.ab.nets);
  nn::save_checkpoint(dir / "checkpoint_phi.json", std::span<const nn::MlpParams>(&t.state.phi, 1));
  r.files = {"loss_dual.csv", "samples.csv", "checkpoint_ab.json", "checkpoint_phi.json"};
  r.report = {{"epochs_completed", t.epochs_completed},
              {"value_estimate", t.value_estimate},
              {"parameter_count", t.state.ab.parameter_count() + t.state.phi.parameter_count()}};
  if (!t.l1.empty()) {
    r.report["final_l1"] = t.l1.back();
    r.report["final_l2"] = t.l2.back();
  }
  r.report["terminal"] = moments_json(t.terminal_samples);
  r.report["last_iterate"] = moments_json(t.last_iterate_samples);
  r.report["snapshot_epochs"] = t.snapshot_epochs;
  r.report["metrics"] = write_metrics(dir, t.terminal_samples, cfg.target, directions, seed);
  r.files.insert(r.files.end(), {"metrics.json", "wasserstein_hist.csv", "qq.csv"});
  r.report["train_seconds"] = t.wall_seconds;
  return r;
}

ModeResult run_portfolio(const json& block, std::uint64_t seed, const std::optional<std::size_t>& epochs,
                         const std::filesystem::path& dir, json& resolved) {
  json stripped = block;
  const std::size_t directions = take_directions(stripped, "portfolio");
  auto cfg = parse_portfolio(stripped, seed);
  if (epochs) cfg.base.epochs = *epochs;
  resolved = to_json(cfg);
  resolved["metrics_directions"] = directions;

  const auto p = portfolio::train_portfolio(cfg);
  const auto& t = p.train;
  ModeResult r;
  primal::write_loss_csv(dir / "loss.csv", t);
  io::write_samples_csv(dir / "samples.csv", t.terminal_samples);
  nn::save_checkpoint(dir / "checkpoint.json", t.networks.nets);
  portfolio::write_alpha_csv(dir / "alpha.csv", p);
  r.files = {"loss.csv", "samples.csv", "checkpoint.json", "alpha.csv"};
  add_grid(r, dir, t);
  r.report = loss_summary(t);
  r.report["negative_wealth_fraction"] = p.negative_wealth_fraction;
  r.report["worst_violation"] = p.worst_violation;
  r.report["alpha_min"] = p.alpha_min;
  r.report["alpha_max"] = p.alpha_max;
  r.report["controls_in_box"] = p.controls_in_box;
  r.report["terminal"] = moments_json(t.terminal_samples);
  r.report["metrics"] = write_metrics(dir, t.terminal_samples, cfg.base.target, directions, seed);
  r.files.insert(r.files.end(), {"metrics.json", "wasserstein_hist.csv", "qq.csv"});
  r.report["train_seconds"] = t.wall_seconds;
  return r;
}

ModeResult run_validate(const json& block, std::uint64_t seed, const std::filesystem::path& base_dir,
                        const std::filesystem::path& dir, json& resolved) {
  Block b(block, "validate");
  std::filesystem::path samples_path = b.text("samples");
  const auto target = parse_target(b.raw("target"));
  const std::size_t directions = b.count("directions", kDefaultDirections);
  b.finish();
  if (samples_path.is_relative()) samples_path = base_dir / samples_path;
  resolved = {{"samples", samples_path.string()}, {"target", to_json(target)}, {"directions", directions}};

  const auto samples = io::read_samples_csv(samples_path);
  if (samples.cols() != target.dim()) throw ConfigError("validate: samples have " + std::to_string(samples.cols()) +
                                                        " columns, target has dimension " + std::to_string(target.dim()));
  ModeResult r;
  r.report = {{"sample_count", samples.rows()}, {"terminal", moments_json(samples)}};
  r.report["metrics"] = write_metrics(dir, samples, target, directions, seed);
  r.files = {"metrics.json", "wasserstein_hist.csv", "qq.csv"};
  return r;
}

int classify(std::ostream& log, int code, const std::string& kind, const std::string& what) {
  log << "smot: " << kind << ": " << what << '\n';
  return code;
}

}  // namespace

density::TargetSpec parse_target(const json& j) { return parse_target_block(Block(j, "target")); }

json to_json(const density::TargetSpec& t) {
  if (t.empty()) return nullptr;
  if (t.is_gaussian()) {
    const auto& g = t.as_gaussian();
    return {{"kind", "gaussian"}, {"mean", g.mean}, {"cov", matrix_json(g.cov)}};
  }
  const auto& m = t.as_mixture();
  return {{"kind", "mixture"}, {"weights", m.weights}, {"means", m.means}, {"stddevs", m.stddevs}};
}

primal::PrimalConfig parse_primal(const json& j, sde::ArchMode arch, std::uint64_t seed) {
  Block b(j, arch == sde::ArchMode::Merged ? "primal_merged" : "primal_bank");
  primal::PrimalConfig c;
  c.sim = parse_sim(b.sub("sim"), false);
  c.sim.arch = arch;
  parse_primal_fields(b, c);
  b.finish();
  c.seed = seed;
  c.validate();
  return c;
}

json to_json(const primal::PrimalConfig& c) {
  json j = primal_fields_json(c);
  j["sim"] = sim_json(c.sim, false);
  return j;
}

dual::DualConfig parse_dual(const json& j, std::uint64_t seed) {
  Block b(j, "dual");
  dual::DualConfig c;
  c.sim = parse_sim(b.sub("sim"), false);
  c.sim.arch = sde::ArchMode::Merged;
  c.ab_net = parse_net(b.sub("ab_net"));
  c.phi_net = parse_net(b.sub("phi_net"));
  c.cost = parse_cost(b.sub("cost"));
  c.target = parse_target(b.raw("target"));
  c.target_samples = b.count("target_samples", c.target_samples);
  c.epochs = b.count("epochs", c.epochs);
  c.batch_size = b.count("batch_size", c.batch_size);
  c.lr_ab = b.number("lr_ab", c.lr_ab);
  c.lr_phi = b.number("lr_phi", c.lr_phi);
  c.beta1 = b.number("beta1", c.beta1);
  c.beta2 = b.number("beta2", c.beta2);
  c.train_phi = b.flag("train_phi", c.train_phi);
  c.centre_phi_input = b.flag("centre_phi_input", c.centre_phi_input);
  c.refresh_terminal = b.flag("refresh_terminal", c.refresh_terminal);
  c.optimistic = b.flag("optimistic", c.optimistic);
  c.average_fraction = b.number("average_fraction", c.average_fraction);
  c.average_snapshots = b.count("average_snapshots", c.average_snapshots);
  b.finish();
  c.seed = seed;
  c.validate();
  return c;
}

json to_json(const dual::DualConfig& c) {
  return {{"sim", sim_json(c.sim, false)},
          {"ab_net", net_json(c.ab_net)},
          {"phi_net", net_json(c.phi_net)},
          {"cost", cost_json(c.cost)},
          {"target", to_json(c.target)},
          {"target_samples", c.target_samples},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_ab", c.lr_ab},
          {"lr_phi", c.lr_phi},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"train_phi", c.train_phi},
          {"centre_phi_input", c.centre_phi_input},
          {"refresh_terminal", c.refresh_terminal},
          {"optimistic", c.optimistic},
          {"average_fraction", c.average_fraction},
          {"average_snapshots", c.average_snapshots}};
}

portfolio::PortfolioConfig parse_portfolio(const json& j, std::uint64_t seed) {
  Block b(j, "portfolio");
  portfolio::PortfolioConfig c;
  c.base.sim = parse_sim(b.sub("sim"), true);
  c.base.cost = sde::ControlShiftSq{};
  parse_primal_fields(b, c.base);
  c.market = parse_market(b.sub("market"));
  if (b.has("box")) {
    Block box = b.sub("box");
    c.box.lo = box.numbers("lo");
    c.box.hi = box.numbers("hi");
    box.finish();
  } else {
    c.box = portfolio::ControlBox::uniform(c.market.assets());
  }
  b.finish();
  c.base.seed = seed;
  c.validate();
  return c;
}

json to_json(const portfolio::PortfolioConfig& c) {
  json j = primal_fields_json(c.base);
  j["sim"] = sim_json(c.base.sim, true);
  json regimes = json::array();
  for (const auto& r : c.market.regimes())
    regimes.push_back({{"start", r.start}, {"mu", r.mu}, {"cov", matrix_json(r.cov)}});
  j["market"] = {{"regimes", regimes}};
  j["box"] = {{"lo", c.box.lo}, {"hi", c.box.hi}};
  return j;
}

json load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io::IoError("cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

int run(json config, const Overrides& overrides, const std::filesystem::path& base_dir, std::ostream& log) {
  const auto started = std::chrono::steady_clock::now();
  try {
    Block top(config, "config");
    const std::string mode = top.text("mode");
    if (std::find(std::begin(kModes), std::end(kModes), mode) == std::end(kModes))
      top.fail("unknown mode '" + mode + "'");
    if (overrides.mode && *overrides.mode != mode)
      top.fail("--mode " + *overrides.mode + " does not match config mode " + mode);
    if (!top.has("seed") && !overrides.seed) top.fail("missing key 'seed'");
    const std::uint64_t config_seed = top.has("seed") ? top.count("seed") : 0;
    const std::uint64_t seed = overrides.seed.value_or(config_seed);
    const std::filesystem::path config_out = top.text("out_dir", "out");
    const std::filesystem::path out_dir = overrides.out_dir.value_or(config_out);
    for (const char* m : kModes)
      if (m != mode && top.has(m)) top.fail("block '" + std::string(m) + "' does not belong to mode " + mode);
    const json& block = top.raw(mode);
    top.finish();
    if (overrides.epochs && mode == "validate") throw ConfigError("--epochs does not apply to mode validate");

    std::filesystem::create_directories(out_dir);
    json resolved_block;
    ModeResult result;
    if (mode == "primal_bank" || mode == "primal_merged")
      result = run_primal(mode, block, seed, overrides.epochs, out_dir, resolved_block);
    else if (mode == "dual")
      result = run_dual(block, seed, overrides.epochs, out_dir, resolved_block);
    else if (mode == "portfolio")
      result = run_portfolio(block, seed, overrides.epochs, out_dir, resolved_block);
    else
      result = run_validate(block, seed, base_dir, out_dir, resolved_block);

    write_json(out_dir / "config_resolved.json",
               {{"mode", mode}, {"seed", seed}, {"out_dir", out_dir.string()}, {mode, resolved_block}});
    json report = result.report;
    const double train_seconds = report.value("train_seconds", 0.0);
    report.erase("train_seconds");
    report["mode"] = mode;
    report["seed"] = seed;
    result.files.insert(result.files.end(), {"config_resolved.json", "report.json"});
    report["files"] = result.files;
    report["timing"] = {
        {"train_seconds", train_seconds},
        {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count()}};
    write_json(out_dir / "report.json", report);
    log << "smot: " << mode << " finished, outputs in " << out_dir.string() << '\n';
    return kOk;
  } catch (const ConfigError& e) {
    return classify(log, kConfig, "config error", e.what());
  } catch (const json::exception& e) {
    return classify(log, kConfig, "config error", e.what());
  } catch (const std::invalid_argument& e) {
    return classify(log, kConfig, "invalid configuration", e.what());
  } catch (const sde::DivergenceError& e) {
    return classify(log, kDivergence, "divergence", e.what());
  } catch (const io::IoError& e) {
    return classify(log, kIo, "i/o error", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return classify(log, kIo, "i/o error", e.what());
  } catch (const std::exception& e) {
    return classify(log, kFailure, "error", e.what());
  }
}

int run_file(const std::filesystem::path& config_path, const Overrides& overrides, std::ostream& log) {
  json config;
  try {
    config = load_config(config_path);
  } catch (const ConfigError& e) {
    return classify(log, kConfig, "config error", e.what());
  } catch (const io::IoError& e) {
    return classify(log, kIo, "i/o error", e.what());
  }
  return run(std::move(config), overrides, config_path.parent_path(), log);
}

}  // namespace smot::cli
