#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "oodtv/autodiff.hpp"
#include "oodtv/tensor.hpp"

namespace oodtv {

enum class LayerKind { linear, relu, sigmoid, softplus, softmax };

std::string to_string(LayerKind kind);
LayerKind parse_layer_kind(const std::string& name);

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  std::size_t in = 0;
  std::size_t out = 0;

  /// weights (in x out) plus biases (out) for linear layers, zero otherwise.
  std::size_t param_count() const noexcept;
  bool operator==(const LayerSpec&) const = default;
};

/// Ordered layer stack. Activation layers keep their width (in == out).
struct NetworkSpec {
  std::vector<LayerSpec> layers;

  /// Throws ShapeError naming the first offending layer index.
  void validate() const;
  std::size_t param_count() const noexcept;
  std::size_t in_dim() const;
  std::size_t out_dim() const;
  LayerKind head() const;
  bool operator==(const NetworkSpec&) const = default;
};

/// Builder for linear/activation chains: dims {d0, d1, ..., dk} gives k linear
/// layers with `hidden` between them and `head` after the last one (none when
/// head is linear).
NetworkSpec perceptron(const std::vector<std::size_t>& dims, LayerKind hidden, LayerKind head);

// Simulation-task architectures.
NetworkSpec simulation_phi_spec();                            // Linear(15,1)
NetworkSpec simulation_rho_spec();                            // Linear(1,16) ReLU Linear(16,1) Sigmoid
NetworkSpec simulation_lambda_spec(std::size_t phi_params);  // Linear(d,1) ReLU Linear(1,1) Softplus

/// A layer stack plus its flat parameter vector.
///
/// Parameter layout: for each linear layer in order, the (in x out) weight
/// matrix row-major followed by the out biases. Inputs multiply on the left,
/// y = x W + b.
class Network {
 public:
  Network() = default;
  Network(NetworkSpec spec, std::vector<double> params);

  /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)] for weights and biases.
  static Network build(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const noexcept { return spec_; }
  const std::vector<double>& params() const noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }

  /// Replace the parameter vector; its length must not change.
  void set_params(std::vector<double> params);

  /// Per-layer weight and bias tensors, in layout order.
  std::vector<Tensor> unflatten() const;
  static std::vector<double> flatten(const std::vector<Tensor>& parts);

 private:
  NetworkSpec spec_;
  std::vector<double> params_;
};

/// A network whose parameters are leaves on a tape.
class BoundNetwork {
 public:
  BoundNetwork(Tape& tape, const Network& net, bool trainable = true);

  Var forward(const Var& input) const;
  /// All parameters as a (1 x P) row in layout order.
  Var flat() const;
  /// Gradient of the backward output w.r.t. the parameters, in layout order.
  std::vector<double> gather(const Gradients& grads) const;

  const Network& network() const noexcept { return *net_; }
  const std::vector<Var>& leaves() const noexcept { return leaves_; }

 private:
  const Network* net_;
  std::vector<Var> leaves_;  // W0, b0, W1, b1, ...
};

/// Batched forward pass on a private tape.
Tensor evaluate(const Network& net, const Tensor& input);

/// Penalty strength for a feature-extractor parameter vector.
double lambda_value(const Network& lambda_net, std::span<const double> phi_params);
Var lambda_value(const BoundNetwork& lambda_net, const Var& phi_flat);

/// Per-sample environment weights, one simplex row per sample. A single
/// sigmoid output s expands to the row [s, 1 - s].
Tensor rho_weights(const Network& rho_net, const Tensor& aux);
/// Weight columns (each n x 1), one per inferred environment.
std::vector<Var> rho_weights(const BoundNetwork& rho_net, const Var& aux);
/// Number of inferred environments a ρ network produces.
std::size_t rho_environment_count(const NetworkSpec& spec);

// Text checkpoint, see README for the layout.
void write_network(std::ostream& os, const std::string& name, const Network& net);
/// Reads one network block; returns its name through `name`.
Network read_network(std::istream& is, std::string& name);

}  // namespace oodtv
