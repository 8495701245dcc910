#include "oodtv/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace oodtv {

std::string to_string(Flavor f) { return f == Flavor::l1 ? "l1" : "l2"; }

Flavor parse_flavor(const std::string& s) {
  if (s == "l1" || s == "ℓ1") return Flavor::l1;
  if (s == "l2" || s == "ℓ2") return Flavor::l2;
  throw Error("unknown flavor '" + s + "' (expected l1 or l2)");
}

namespace {

void require_nonempty(const EnvBatch& env, const char* op) {
  if (env.empty()) throw Error(std::string(op) + ": empty environment");
}

LagrangianBreakdown read(const LagrangianTerms& t) {
  return {t.fidelity.item(), t.penalty_base.item(), t.lambda.item(), t.total.item()};
}

Var combine(const Var& fidelity, const Var& lambda, const Var& penalty_base) {
  return fidelity + lambda * penalty_base;
}

}  // namespace

Var empirical_risk(const Var& logits, const Tensor& labels) {
  return mean(bce_with_logits(logits, labels));
}

Var grad_w_risk(const Var& logits, const Tensor& labels) {
  Tape& tape = *logits.tape();
  Var residual = sigmoid(logits) - tape.constant(labels);
  return mean(residual * logits);
}

double empirical_risk(const Network& phi, double w, const EnvBatch& env) {
  require_nonempty(env, "empirical_risk");
  if (!std::isfinite(w)) throw Error("empirical_risk: non-finite classifier scale");
  Tape tape;
  BoundNetwork bound(tape, phi, false);
  Var logits = scale(bound.forward(tape.constant(env.x)), w);
  return empirical_risk(logits, env.y).item();
}

double grad_w_risk(const Network& phi, const EnvBatch& env) {
  require_nonempty(env, "grad_w_risk");
  Tape tape;
  BoundNetwork bound(tape, phi, false);
  return grad_w_risk(bound.forward(tape.constant(env.x)), env.y).item();
}

double tv_expectation(std::span<const double> grad_magnitudes, std::span<const double> weights) {
  if (grad_magnitudes.size() != weights.size()) {
    throw ShapeError("tv_expectation: " + std::to_string(grad_magnitudes.size()) +
                     " magnitudes for " + std::to_string(weights.size()) + " weights");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * std::abs(grad_magnitudes[i]);
  return s;
}

LagrangianTerms g_terms(const BoundNetwork& phi, const Var& lambda,
                        const std::vector<EnvBatch>& envs, Flavor flavor) {
  if (envs.empty()) throw Error("lagrangian_g: no environments");
  Tape& tape = *lambda.tape();
  LagrangianTerms out;
  std::vector<Var> risks;
  for (const auto& env : envs) {
    require_nonempty(env, "lagrangian_g");
    Var logits = phi.forward(tape.constant(env.x));
    risks.push_back(empirical_risk(logits, env.y));
    out.grad_w.push_back(grad_w_risk(logits, env.y));
  }
  const double inv = 1.0 / static_cast<double>(envs.size());

  Var fidelity = risks.front();
  for (std::size_t i = 1; i < risks.size(); ++i) fidelity = fidelity + risks[i];
  out.fidelity = scale(fidelity, inv);

  Var acc;
  for (const Var& gw : out.grad_w) {
    Var term = flavor == Flavor::l1 ? abs(gw) : square(gw);
    acc = acc.valid() ? acc + term : term;
  }
  Var expectation = scale(acc, inv);
  out.penalty_base = flavor == Flavor::l1 ? square(expectation) : expectation;
  out.lambda = lambda;
  out.total = combine(out.fidelity, lambda, out.penalty_base);
  return out;
}

LagrangianTerms h_terms(const BoundNetwork& phi, const Var& lambda,
                        const std::vector<Var>& weights, const EnvBatch& pooled, Flavor flavor,
                        RiskNormalization norm) {
  require_nonempty(pooled, "lagrangian_h");
  if (weights.empty()) throw Error("lagrangian_h: no inferred environments");
  Tape& tape = *lambda.tape();
  const double n = static_cast<double>(pooled.size());

  Var logits = phi.forward(tape.constant(pooled.x));
  Var losses = bce_with_logits(logits, pooled.y);
  Var slopes = (sigmoid(logits) - tape.constant(pooled.y)) * logits;

  LagrangianTerms out;
  Var fidelity, penalty;
  for (const Var& w : weights) {
    if (w.value().size() != pooled.size()) {
      throw ShapeError("lagrangian_h: weight column " + shape_string(w.shape()) + " for " +
                       std::to_string(pooled.size()) + " samples");
    }
    Var mass = sum(w);
    Var risk_num = weighted_sum(losses, w);
    Var slope_num = weighted_sum(slopes, w);
    Var risk, gw, env_weight;
    if (norm == RiskNormalization::weight_sum) {
      risk = safe_div(risk_num, mass);
      gw = safe_div(slope_num, mass);
      env_weight = scale(mass, 1.0 / n);
    } else {
      risk = scale(risk_num, 1.0 / n);
      gw = scale(slope_num, 1.0 / n);
      env_weight = tape.scalar(1.0);
    }
    out.grad_w.push_back(gw);
    Var term = env_weight * (flavor == Flavor::l1 ? abs(gw) : square(gw));
    fidelity = fidelity.valid() ? fidelity + risk : risk;
    penalty = penalty.valid() ? penalty + term : term;
  }
  out.fidelity = scale(fidelity, 1.0 / static_cast<double>(weights.size()));
  out.penalty_base = flavor == Flavor::l1 ? square(penalty) : penalty;
  out.lambda = lambda;
  out.total = combine(out.fidelity, lambda, out.penalty_base);
  return out;
}

LagrangianBreakdown lagrangian_g(const Network& phi, const Network& lambda_net,
                                 const std::vector<EnvBatch>& envs, Flavor flavor) {
  Tape tape;
  BoundNetwork p(tape, phi, false);
  BoundNetwork l(tape, lambda_net, false);
  return read(g_terms(p, lambda_value(l, p.flat()), envs, flavor));
}

LagrangianBreakdown lagrangian_g(const Network& phi, double fixed_lambda,
                                 const std::vector<EnvBatch>& envs, Flavor flavor) {
  Tape tape;
  BoundNetwork p(tape, phi, false);
  return read(g_terms(p, tape.scalar(fixed_lambda), envs, flavor));
}

LagrangianBreakdown lagrangian_h(const Network& phi, const Network& lambda_net,
                                 const Network& rho_net, const EnvBatch& pooled, Flavor flavor,
                                 RiskNormalization norm) {
  Tape tape;
  BoundNetwork p(tape, phi, false);
  BoundNetwork l(tape, lambda_net, false);
  BoundNetwork r(tape, rho_net, false);
  const auto w = rho_weights(r, tape.constant(pooled.t));
  return read(h_terms(p, lambda_value(l, p.flat()), w, pooled, flavor, norm));
}

LagrangianBreakdown lagrangian_h(const Network& phi, double fixed_lambda, const Network& rho_net,
                                 const EnvBatch& pooled, Flavor flavor, RiskNormalization norm) {
  Tape tape;
  BoundNetwork p(tape, phi, false);
  BoundNetwork r(tape, rho_net, false);
  const auto w = rho_weights(r, tape.constant(pooled.t));
  return read(h_terms(p, tape.scalar(fixed_lambda), w, pooled, flavor, norm));
}

GradBundle grads_g(const Network& phi, const Network& lambda_net,
                   const std::vector<EnvBatch>& envs, Flavor flavor) {
  Tape tape;
  BoundNetwork p(tape, phi);
  BoundNetwork l(tape, lambda_net);
  const auto terms = g_terms(p, lambda_value(l, p.flat()), envs, flavor);
  const Gradients grads = tape.backward(terms.total);
  return {p.gather(grads), l.gather(grads), std::nullopt};
}

GradBundle grads_h(const Network& phi, const Network& lambda_net, const Network& rho_net,
                   const EnvBatch& pooled, Flavor flavor, RiskNormalization norm) {
  Tape tape;
  BoundNetwork p(tape, phi);
  BoundNetwork l(tape, lambda_net);
  BoundNetwork r(tape, rho_net);
  const auto w = rho_weights(r, tape.constant(pooled.t));
  const auto terms = h_terms(p, lambda_value(l, p.flat()), w, pooled, flavor, norm);
  const Gradients grads = tape.backward(terms.total);
  return {p.gather(grads), l.gather(grads), r.gather(grads)};
}

LagrangianObjective LagrangianObjective::irm(NetworkSpec phi, std::optional<NetworkSpec> lambda,
                                             std::vector<EnvBatch> envs, Flavor flavor,
                                             double fixed_lambda) {
  if (envs.empty()) throw Error("objective: no training environments");
  LagrangianObjective o;
  o.phi_spec_ = std::move(phi);
  o.lambda_spec_ = std::move(lambda);
  o.envs_ = std::move(envs);
  o.flavor_ = flavor;
  o.fixed_lambda_ = fixed_lambda;
  return o;
}

LagrangianObjective LagrangianObjective::minimax(NetworkSpec phi, std::optional<NetworkSpec> lambda,
                                                 NetworkSpec rho, EnvBatch pooled, Flavor flavor,
                                                 double fixed_lambda, RiskNormalization norm) {
  require_nonempty(pooled, "objective");
  rho_environment_count(rho);
  LagrangianObjective o;
  o.phi_spec_ = std::move(phi);
  o.lambda_spec_ = std::move(lambda);
  o.rho_spec_ = std::move(rho);
  o.envs_.push_back(std::move(pooled));
  o.flavor_ = flavor;
  o.fixed_lambda_ = fixed_lambda;
  o.norm_ = norm;
  return o;
}

Evaluation LagrangianObjective::evaluate(const ModelParams& params,
                                         std::optional<double> lambda_override,
                                         bool with_grads) const {
  const Network phi(phi_spec_, params.phi);
  std::optional<Network> lambda_net;
  std::optional<Network> rho_net;
  if (lambda_spec_) lambda_net.emplace(*lambda_spec_, params.psi);
  if (rho_spec_) rho_net.emplace(*rho_spec_, params.rho);

  Tape tape;
  BoundNetwork p(tape, phi, with_grads);
  std::optional<BoundNetwork> l;
  std::optional<BoundNetwork> r;
  Var lambda;
  if (lambda_override) {
    lambda = tape.scalar(*lambda_override);
  } else if (lambda_net) {
    l.emplace(tape, *lambda_net, with_grads);
    lambda = lambda_value(*l, p.flat());
  } else {
    lambda = tape.scalar(fixed_lambda_);
  }

  LagrangianTerms terms;
  if (rho_net) {
    r.emplace(tape, *rho_net, with_grads);
    const EnvBatch& pooled = envs_.front();
    terms = h_terms(p, lambda, rho_weights(*r, tape.constant(pooled.t)), pooled, flavor_, norm_);
  } else {
    terms = g_terms(p, lambda, envs_, flavor_);
  }

  Evaluation out;
  out.value = read(terms);
  if (!with_grads) return out;

  const Gradients grads = tape.backward(terms.total);
  out.grads.d_phi = p.gather(grads);
  if (lambda_spec_) {
    out.grads.d_psi = l ? l->gather(grads) : std::vector<double>(lambda_spec_->param_count(), 0.0);
  }
  if (r) out.grads.d_rho = r->gather(grads);
  return out;
}

SemiNashReport semi_nash_check(const PairEvaluator& g, const std::vector<double>& phi_star,
                               const std::vector<double>& psi_star,
                               const std::vector<std::vector<double>>& phi_grid,
                               const std::vector<std::vector<double>>& psi_grid, double tol) {
  if (phi_grid.empty() || psi_grid.empty()) throw Error("semi_nash_check: empty grid");

  SemiNashReport report;
  const double at_star = g(psi_star, phi_star);

  double item1 = -std::numeric_limits<double>::infinity();
  for (const auto& psi : psi_grid) item1 = std::max(item1, g(psi, phi_star) - at_star);

  auto upper = [&](const std::vector<double>& phi) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& psi : psi_grid) best = std::max(best, g(psi, phi));
    return best;
  };
  const double g_star = upper(phi_star);
  double item2 = -std::numeric_limits<double>::infinity();
  for (const auto& phi : phi_grid) item2 = std::max(item2, g_star - upper(phi));

  report.item1_violation = std::max(0.0, item1);
  report.item2_violation = std::max(0.0, item2);
  report.item1_ok = item1 <= tol;
  report.item2_ok = item2 <= tol;
  report.worst_violation = std::max(report.item1_violation, report.item2_violation);
  return report;
}

}  // namespace oodtv
