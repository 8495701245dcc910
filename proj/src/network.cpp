#include "oodtv/network.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>

namespace oodtv {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::softplus: return "softplus";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

LayerKind parse_layer_kind(const std::string& name) {
  if (name == "linear") return LayerKind::linear;
  if (name == "relu") return LayerKind::relu;
  if (name == "sigmoid") return LayerKind::sigmoid;
  if (name == "softplus") return LayerKind::softplus;
  if (name == "softmax") return LayerKind::softmax;
  throw Error("unknown layer kind '" + name + "'");
}

std::size_t LayerSpec::param_count() const noexcept {
  return kind == LayerKind::linear ? in * out + out : 0;
}

void NetworkSpec::validate() const {
  if (layers.empty()) throw ShapeError("network spec: no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.in == 0 || l.out == 0) {
      throw ShapeError("network spec: layer " + std::to_string(i) + " has a zero dimension");
    }
    if (l.kind != LayerKind::linear && l.in != l.out) {
      throw ShapeError("network spec: activation layer " + std::to_string(i) + " (" +
                       to_string(l.kind) + ") maps " + std::to_string(l.in) + " to " +
                       std::to_string(l.out));
    }
    if (i > 0 && layers[i - 1].out != l.in) {
      throw ShapeError("network spec: layer " + std::to_string(i) + " expects " +
                       std::to_string(l.in) + " inputs but layer " + std::to_string(i - 1) +
                       " produces " + std::to_string(layers[i - 1].out));
    }
  }
}

std::size_t NetworkSpec::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.param_count();
  return n;
}

std::size_t NetworkSpec::in_dim() const {
  validate();
  return layers.front().in;
}

std::size_t NetworkSpec::out_dim() const {
  validate();
  return layers.back().out;
}

LayerKind NetworkSpec::head() const {
  validate();
  return layers.back().kind;
}

NetworkSpec perceptron(const std::vector<std::size_t>& dims, LayerKind hidden, LayerKind head) {
  if (dims.size() < 2) throw ShapeError("perceptron: need at least input and output dims");
  NetworkSpec spec;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    spec.layers.push_back({LayerKind::linear, dims[i], dims[i + 1]});
    const bool last = i + 2 == dims.size();
    const LayerKind act = last ? head : hidden;
    if (act != LayerKind::linear) spec.layers.push_back({act, dims[i + 1], dims[i + 1]});
  }
  spec.validate();
  return spec;
}

NetworkSpec simulation_phi_spec() { return perceptron({15, 1}, LayerKind::relu, LayerKind::linear); }

NetworkSpec simulation_rho_spec() {
  return perceptron({1, 16, 1}, LayerKind::relu, LayerKind::sigmoid);
}

NetworkSpec simulation_lambda_spec(std::size_t phi_params) {
  return perceptron({phi_params, 1, 1}, LayerKind::relu, LayerKind::softplus);
}

Network::Network(NetworkSpec spec, std::vector<double> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  if (params_.size() != spec_.param_count()) {
    throw ShapeError("network: spec needs " + std::to_string(spec_.param_count()) +
                     " parameters, got " + std::to_string(params_.size()));
  }
}

Network Network::build(NetworkSpec spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<double> params;
  params.reserve(spec.param_count());
  for (const auto& l : spec.layers) {
    if (l.kind != LayerKind::linear) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < l.param_count(); ++i) params.push_back(u(rng));
  }
  return Network(std::move(spec), std::move(params));
}

void Network::set_params(std::vector<double> params) {
  if (params.size() != params_.size()) {
    throw ShapeError("network: set_params with " + std::to_string(params.size()) +
                     " values, expected " + std::to_string(params_.size()));
  }
  params_ = std::move(params);
}

std::vector<Tensor> Network::unflatten() const {
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  auto take = [&](Shape shape) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> v(params_.begin() + static_cast<std::ptrdiff_t>(offset),
                          params_.begin() + static_cast<std::ptrdiff_t>(offset + n));
    offset += n;
    parts.emplace_back(std::move(shape), std::move(v));
  };
  for (const auto& l : spec_.layers) {
    if (l.kind != LayerKind::linear) continue;
    take(Shape{l.in, l.out});
    take(Shape{1, l.out});
  }
  return parts;
}

std::vector<double> Network::flatten(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return out;
}

BoundNetwork::BoundNetwork(Tape& tape, const Network& net, bool trainable) : net_(&net) {
  for (auto& part : net.unflatten()) leaves_.push_back(tape.leaf(std::move(part), trainable));
}

Var BoundNetwork::forward(const Var& input) const {
  const NetworkSpec& spec = net_->spec();
  const Tensor& x = input.value();
  if (x.rank() != 2 || x.cols() != spec.in_dim()) {
    throw ShapeError("evaluate: input shape " + shape_string(x.shape()) +
                     " does not match network input dim " + std::to_string(spec.in_dim()));
  }
  Var h = input;
  std::size_t leaf = 0;
  for (const auto& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::linear:
        h = add(matmul(h, leaves_[leaf]), leaves_[leaf + 1]);
        leaf += 2;
        break;
      case LayerKind::relu: h = relu(h); break;
      case LayerKind::sigmoid: h = sigmoid(h); break;
      case LayerKind::softplus: h = softplus(h); break;
      case LayerKind::softmax: h = softmax(h); break;
    }
  }
  return h;
}

Var BoundNetwork::flat() const { return concat_flat(leaves_); }

std::vector<double> BoundNetwork::gather(const Gradients& grads) const {
  std::vector<double> out;
  out.reserve(net_->param_count());
  for (const Var& v : leaves_) {
    const Tensor& g = grads[v];
    out.insert(out.end(), g.data().begin(), g.data().end());
  }
  return out;
}

Tensor evaluate(const Network& net, const Tensor& input) {
  Tape tape;
  BoundNetwork bound(tape, net, false);
  return bound.forward(tape.constant(input)).value();
}

Var lambda_value(const BoundNetwork& lambda_net, const Var& phi_flat) {
  const std::size_t expected = lambda_net.network().spec().in_dim();
  if (phi_flat.value().size() != expected) {
    throw ShapeError("lambda_value: network takes " + std::to_string(expected) +
                     " inputs, got a parameter vector of length " +
                     std::to_string(phi_flat.value().size()));
  }
  if (lambda_net.network().spec().out_dim() != 1) {
    throw ShapeError("lambda_value: penalty network must have a single output");
  }
  return lambda_net.forward(phi_flat);
}

double lambda_value(const Network& lambda_net, std::span<const double> phi_params) {
  Tape tape;
  BoundNetwork bound(tape, lambda_net, false);
  Var x = tape.constant(
      Tensor(Shape{1, phi_params.size()}, std::vector<double>(phi_params.begin(), phi_params.end())));
  return lambda_value(bound, x).item();
}

std::size_t rho_environment_count(const NetworkSpec& spec) {
  const std::size_t out = spec.out_dim();
  if (spec.head() == LayerKind::sigmoid && out == 1) return 2;
  if (spec.head() == LayerKind::softmax) return out;
  throw ShapeError("rho network: head must be a single sigmoid or a softmax, got " +
                   to_string(spec.head()) + " with " + std::to_string(out) + " outputs");
}

std::vector<Var> rho_weights(const BoundNetwork& rho_net, const Var& aux) {
  const NetworkSpec& spec = rho_net.network().spec();
  const std::size_t envs = rho_environment_count(spec);
  Var out = rho_net.forward(aux);
  if (spec.head() == LayerKind::sigmoid) {
    return {out, shift(neg(out), 1.0)};
  }
  std::vector<Var> cols;
  for (std::size_t j = 0; j < envs; ++j) cols.push_back(column(out, j));
  return cols;
}

Tensor rho_weights(const Network& rho_net, const Tensor& aux) {
  Tape tape;
  BoundNetwork bound(tape, rho_net, false);
  const auto cols = rho_weights(bound, tape.constant(aux));
  const std::size_t n = aux.rows();
  Tensor out(Shape{n, cols.size()});
  for (std::size_t j = 0; j < cols.size(); ++j) {
    const Tensor& c = cols[j].value();
    for (std::size_t r = 0; r < n; ++r) out.at(r, j) = c[r];
  }
  return out;
}

namespace {

std::string format_exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void malformed(const std::string& what) {
  throw Error("checkpoint: malformed network block: " + what);
}

template <class T>
T expect_field(std::istream& is, const std::string& key) {
  std::string word;
  if (!(is >> word) || word != key) malformed("expected '" + key + "', got '" + word + "'");
  T value{};
  if (!(is >> value)) malformed("bad value after '" + key + "'");
  return value;
}

}  // namespace

void write_network(std::ostream& os, const std::string& name, const Network& net) {
  const auto& spec = net.spec();
  os << "network " << name << '\n';
  os << "layers " << spec.layers.size() << '\n';
  for (const auto& l : spec.layers) os << to_string(l.kind) << ' ' << l.in << ' ' << l.out << '\n';
  os << "params " << net.param_count() << '\n';
  for (double v : net.params()) os << format_exact(v) << '\n';
  os << "end\n";
}

Network read_network(std::istream& is, std::string& name) {
  name = expect_field<std::string>(is, "network");
  const auto n_layers = expect_field<std::size_t>(is, "layers");
  NetworkSpec spec;
  for (std::size_t i = 0; i < n_layers; ++i) {
    std::string kind;
    LayerSpec l;
    if (!(is >> kind >> l.in >> l.out)) malformed("layer " + std::to_string(i));
    l.kind = parse_layer_kind(kind);
    spec.layers.push_back(l);
  }
  const auto n_params = expect_field<std::size_t>(is, "params");
  std::vector<double> params(n_params);
  for (auto& v : params) {
    std::string tok;
    if (!(is >> tok)) malformed("truncated parameter list");
    v = std::strtod(tok.c_str(), nullptr);
  }
  std::string end;
  if (!(is >> end) || end != "end") malformed("missing 'end'");
  return Network(std::move(spec), std::move(params));
}

}  // namespace oodtv
