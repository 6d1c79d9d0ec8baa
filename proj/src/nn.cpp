#include "smot/nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace smot::nn {

using ad::Tensor;
using ad::Var;

void MlpConfig::validate() const {
  if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("MlpConfig: dimensions must be >= 1");
  for (std::size_t w : hidden)
    if (w == 0) throw std::invalid_argument("MlpConfig: hidden widths must be >= 1");
  if (!(output_init_scale > 0.0)) throw std::invalid_argument("MlpConfig: output_init_scale must be > 0");
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
  return n;
}

bool MlpParams::layers_equal(const MlpParams& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!(layers[i].weight == other.layers[i].weight) || !(layers[i].bias == other.layers[i].bias)) return false;
  }
  return true;
}

void standardise_inputs(MlpParams& params, std::span<const double> mean, std::span<const double> sd) {
  if (params.layers.empty()) throw std::invalid_argument("standardise_inputs: network has no layers");
  auto& layer = params.layers.front();
  if (mean.size() != sd.size() || mean.size() > layer.weight.rows())
    throw std::invalid_argument("standardise_inputs: moments do not fit the input width");
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double scale = sd[i] > 0.0 ? 1.0 / sd[i] : 1.0;
    for (std::size_t j = 0; j < layer.weight.cols(); ++j) {
      layer.weight(i, j) *= scale;
      layer.bias(0, j) -= mean[i] * layer.weight(i, j);
    }
  }
}

MlpParams init_mlp(const MlpConfig& config, Rng& rng) {
  config.validate();
  MlpParams params{config, {}};
  std::vector<std::size_t> widths{config.input_dim};
  widths.insert(widths.end(), config.hidden.begin(), config.hidden.end());
  widths.push_back(config.output_dim);

  for (std::size_t j = 0; j + 1 < widths.size(); ++j) {
    const std::size_t fan_in = widths[j];
    const std::size_t fan_out = widths[j + 1];
    double bound = std::sqrt(6.0 / double(fan_in));
    if (j + 2 == widths.size()) bound *= config.output_init_scale;
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor w(fan_in, fan_out);
    for (double& v : w.values()) v = dist(rng);
    params.layers.push_back({std::move(w), Tensor(1, fan_out, 0.0)});
  }
  return params;
}

MlpBinding bind(ad::Tape& tape, const MlpParams& params, bool trainable) {
  MlpBinding b;
  b.weights.reserve(params.layers.size());
  b.biases.reserve(params.layers.size());
  for (const auto& layer : params.layers) {
    b.weights.push_back(trainable ? tape.parameter(layer.weight) : tape.constant(layer.weight));
    b.biases.push_back(trainable ? tape.parameter(layer.bias) : tape.constant(layer.bias));
  }
  return b;
}

Var forward_mlp(const MlpParams& params, const MlpBinding& binding, Var x) {
  if (x.cols() != params.config.input_dim)
    throw ad::ShapeError("forward_mlp: input has " + std::to_string(x.cols()) + " columns, network expects " +
                         std::to_string(params.config.input_dim));
  Var h = x;
  const std::size_t last = binding.weights.size() - 1;
  for (std::size_t j = 0; j <= last; ++j) {
    h = ad::add(ad::matmul(h, binding.weights[j]), binding.biases[j]);
    if (j != last) h = ad::leaky_relu(h, params.config.leaky_slope);
  }
  return h;
}

Tensor forward_mlp(const MlpParams& params, const Tensor& x) {
  ad::Tape tape;
  const MlpBinding b = bind(tape, params, false);
  return forward_mlp(params, b, tape.constant(x)).value();
}

MlpGrads collect_grads(const ad::Gradients& grads, const MlpBinding& binding) {
  MlpGrads out;
  out.reserve(binding.weights.size());
  for (std::size_t j = 0; j < binding.weights.size(); ++j)
    out.push_back({grads.of(binding.weights[j]), grads.of(binding.biases[j])});
  return out;
}

SplitOutput split_output(Var y, std::size_t d) {
  if (d == 0 || y.cols() != d + d * d)
    throw ad::ShapeError("split_output: expected " + std::to_string(d + d * d) + " columns, got " +
                         std::to_string(y.cols()));
  return {ad::slice_columns(y, 0, d), ad::slice_columns(y, d, d + d * d)};
}

Var diffusion_from_root(Var root, std::size_t d) {
  if (root.cols() != d * d) throw ad::ShapeError("diffusion_from_root: root must have d*d columns");
  if (d == 1) return ad::square(root);
  ad::Tape& tape = *root.tape;
  const std::size_t d2 = d * d;
  const std::size_t d3 = d2 * d;
  // Column k = (i*d + l)*d + j of the expanded products holds A_ij * A_lj.
  Tensor left(d2, d3, 0.0), right(d2, d3, 0.0), reduce(d3, d2, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t l = 0; l < d; ++l)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t k = (i * d + l) * d + j;
        left(i * d + j, k) = 1.0;
        right(l * d + j, k) = 1.0;
        reduce(k, i * d + l) = 1.0;
      }
  Var products = ad::mul(ad::matmul(root, tape.constant(std::move(left))),
                         ad::matmul(root, tape.constant(std::move(right))));
  return ad::matmul(products, tape.constant(std::move(reduce)));
}

std::vector<double> diffusion_matrix(std::span<const double> root, std::size_t d) {
  if (root.size() != d * d) throw ad::ShapeError("diffusion_matrix: root must have d*d entries");
  std::vector<double> out(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t l = 0; l < d; ++l) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += root[i * d + j] * root[l * d + j];
      out[i * d + l] = acc;
    }
  return out;
}

AdamState make_adam(const MlpParams& params, double lr, double beta1, double beta2, double eps) {
  AdamState s{lr, beta1, beta2, eps, 0, {}, {}};
  for (const auto& layer : params.layers) {
    DenseLayer zeros{Tensor(layer.weight.rows(), layer.weight.cols(), 0.0),
                     Tensor(layer.bias.rows(), layer.bias.cols(), 0.0)};
    s.first_moment.push_back(zeros);
    s.second_moment.push_back(std::move(zeros));
  }
  return s;
}

namespace {
void adam_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, const AdamState& s, double c1, double c2) {
  if (!p.same_shape(g)) throw ad::ShapeError("adam_step: gradient shape mismatch");
  for (std::size_t i = 0; i < p.size(); ++i) {
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    p[i] -= s.lr * m_hat / (std::sqrt(v_hat) + s.eps);
  }
}
}  // namespace

void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state) {
  if (grads.size() != params.layers.size() || state.first_moment.size() != params.layers.size())
    throw ad::ShapeError("adam_step: layer count mismatch");
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.t));
  for (std::size_t j = 0; j < params.layers.size(); ++j) {
    adam_update(params.layers[j].weight, grads[j].weight, state.first_moment[j].weight,
                state.second_moment[j].weight, state, c1, c2);
    adam_update(params.layers[j].bias, grads[j].bias, state.first_moment[j].bias, state.second_moment[j].bias,
                state, c1, c2);
  }
}

// ---------------------------------------------------------------- checkpoints

namespace {

using nlohmann::json;

json tensor_json(const Tensor& t) {
  return json{{"shape", {t.rows(), t.cols()}}, {"data", std::vector<double>(t.values().begin(), t.values().end())}};
}

Tensor tensor_from_json(const json& j) {
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2) throw std::runtime_error("checkpoint: tensor shape must have two entries");
  return Tensor(shape[0], shape[1], j.at("data").get<std::vector<double>>());
}

}  // namespace

std::string checkpoint_to_string(std::span<const MlpParams> networks) {
  json nets = json::array();
  for (const auto& net : networks) {
    json layers = json::array();
    for (const auto& layer : net.layers)
      layers.push_back({{"weight", tensor_json(layer.weight)}, {"bias", tensor_json(layer.bias)}});
    nets.push_back({{"input_dim", net.config.input_dim},
                    {"hidden", net.config.hidden},
                    {"output_dim", net.config.output_dim},
                    {"leaky_slope", net.config.leaky_slope},
                    {"layers", std::move(layers)}});
  }
  json doc{{"format", "smot-mlp"}, {"version", 1}, {"networks", std::move(nets)}};
  return doc.dump();
}

std::vector<MlpParams> checkpoint_from_string(const std::string& text) {
  const json doc = json::parse(text);
  if (doc.value("format", "") != "smot-mlp") throw std::runtime_error("checkpoint: unrecognised format");
  std::vector<MlpParams> out;
  for (const auto& n : doc.at("networks")) {
    MlpParams p;
    p.config.input_dim = n.at("input_dim").get<std::size_t>();
    p.config.hidden = n.at("hidden").get<std::vector<std::size_t>>();
    p.config.output_dim = n.at("output_dim").get<std::size_t>();
    p.config.leaky_slope = n.at("leaky_slope").get<double>();
    for (const auto& l : n.at("layers")) p.layers.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
    if (p.layers.size() != p.config.hidden.size() + 1) throw std::runtime_error("checkpoint: layer count mismatch");
    out.push_back(std::move(p));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, std::span<const MlpParams> networks) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os << checkpoint_to_string(networks) << '\n';
}

std::vector<MlpParams> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return checkpoint_from_string(ss.str());
}

}  // namespace smot::nn
