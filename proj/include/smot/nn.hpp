#pragma once

// Feedforward networks (Leaky-ReLU hidden layers, identity output) and Adam.

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "smot/autodiff.hpp"
#include "smot/random.hpp"

namespace smot::nn {

struct MlpConfig {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 1;
  double leaky_slope = 0.01;
  // Multiplier on the He-uniform bound of the output layer only.
  double output_init_scale = 1.0;

  void validate() const;
};

struct DenseLayer {
  ad::Tensor weight;  // fan_in x fan_out
  ad::Tensor bias;    // 1 x fan_out
};

struct MlpParams {
  MlpConfig config;
  std::vector<DenseLayer> layers;

  std::size_t parameter_count() const;
  friend bool operator==(const MlpParams& a, const MlpParams& b) { return a.layers_equal(b); }

 private:
  bool layers_equal(const MlpParams& other) const;
};

// Gradient buffers laid out exactly like MlpParams::layers.
using MlpGrads = std::vector<DenseLayer>;

MlpParams init_mlp(const MlpConfig& config, Rng& rng);

// Rewrites the first layer so input i enters as (x_i - mean[i]) / sd[i]; inputs
// past mean.size() are untouched. Zero sd leaves the scale alone.
void standardise_inputs(MlpParams& params, std::span<const double> mean, std::span<const double> sd);

// Parameters placed on a tape. Frozen bindings use constant nodes, so no
// gradient is computed for them.
struct MlpBinding {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
};

MlpBinding bind(ad::Tape& tape, const MlpParams& params, bool trainable = true);

ad::Var forward_mlp(const MlpParams& params, const MlpBinding& binding, ad::Var x);

// Forward pass on a scratch tape; convenience for evaluation.
ad::Tensor forward_mlp(const MlpParams& params, const ad::Tensor& x);

MlpGrads collect_grads(const ad::Gradients& grads, const MlpBinding& binding);

// Network output split into drift B (batch x d) and the diffusion root A
// (batch x d*d, row-major d x d per path).
struct SplitOutput {
  ad::Var drift;
  ad::Var root;
};

SplitOutput split_output(ad::Var y, std::size_t d);

// Per-path diffusion matrix A A^T, batch x d*d row-major.
ad::Var diffusion_from_root(ad::Var root, std::size_t d);

// A A^T for one d x d row-major root, off the tape.
std::vector<double> diffusion_matrix(std::span<const double> root, std::size_t d);

struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  MlpGrads first_moment;
  MlpGrads second_moment;
};

AdamState make_adam(const MlpParams& params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                    double eps = 1e-8);

void adam_step(MlpParams& params, const MlpGrads& grads, AdamState& state);

// JSON checkpoint: {"format": "smot-mlp", "version": 1, "networks": [...]},
// each network carrying its config and per-layer {"shape": [r, c], "data": [...]}.
void save_checkpoint(const std::filesystem::path& path, std::span<const MlpParams> networks);
std::vector<MlpParams> load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_to_string(std::span<const MlpParams> networks);
std::vector<MlpParams> checkpoint_from_string(const std::string& text);

}  // namespace smot::nn
