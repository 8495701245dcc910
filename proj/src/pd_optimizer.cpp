#include "oodtv/pd_optimizer.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <random>

#include <json.hpp>

#include "oodtv/precision.hpp"

namespace oodtv {

namespace {

double norm2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

void check_finite(const Evaluation& e, long epoch, const char* where) {
  const auto& g = e.grads;
  if (!all_finite(g.d_phi) || !all_finite(g.d_psi) || (g.d_rho && !all_finite(*g.d_rho))) {
    throw NonFiniteGradient(std::string("primal-dual step: non-finite ") + where +
                            " gradient at epoch " + std::to_string(epoch));
  }
}

}  // namespace

void write_trace_jsonl(std::ostream& os, const TrainTrace& trace) {
  for (const auto& r : trace) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["total"] = round_significant(r.total);
    j["fidelity"] = round_significant(r.fidelity);
    j["penalty"] = round_significant(r.penalty);
    j["lambda"] = round_significant(r.lambda);
    j["dphi_norm"] = round_significant(r.dphi_norm);
    j["dpsi_norm"] = round_significant(r.dpsi_norm);
    os << j.dump() << '\n';
  }
}

TrainTrace read_trace_jsonl(std::istream& is) {
  TrainTrace trace;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    TraceRecord r;
    r.epoch = j.at("epoch").get<long>();
    r.total = j.at("total").get<double>();
    r.fidelity = j.at("fidelity").get<double>();
    r.penalty = j.at("penalty").get<double>();
    r.lambda = j.at("lambda").get<double>();
    r.dphi_norm = j.at("dphi_norm").get<double>();
    r.dpsi_norm = j.at("dpsi_norm").get<double>();
    trace.push_back(r);
  }
  return trace;
}

double step_size(long k, double p, double grad_norm) {
  if (!(p > 1.0)) throw Error("step_size: schedule exponent p must exceed 1");
  if (k < 1) throw Error("step_size: iteration counter starts at 1");
  if (!(grad_norm >= 0.0)) throw Error("step_size: gradient norm must be non-negative");
  if (grad_norm == 0.0) return 0.0;
  return 1.0 / (std::pow(static_cast<double>(k), p) * grad_norm);
}

long iterations_for_tolerance(double p, double eps) {
  if (!(p > 1.0)) throw Error("iterations_for_tolerance: p must exceed 1");
  if (!(eps > 0.0)) throw Error("iterations_for_tolerance: eps must be positive");
  double bound = std::pow((p - 1.0) * eps, -1.0 / (p - 1.0)) + 1.0;
  // Snap values that are integers up to rounding so the strict inequality
  // is decided on the exact bound.
  const double nearest = std::round(bound);
  if (std::abs(bound - nearest) <= 1e-9 * std::max(1.0, nearest)) bound = nearest;
  return static_cast<long>(std::floor(bound)) + 1;
}

std::string to_string(StepRule r) { return r == StepRule::convergent ? "convergent" : "adam"; }

StepRule parse_step_rule(const std::string& s) {
  if (s == "convergent") return StepRule::convergent;
  if (s == "adam") return StepRule::adam;
  throw Error("unknown step rule '" + s + "' (expected convergent or adam)");
}

std::vector<double> Adam::step(const std::vector<double>& grad) {
  if (m_.empty()) {
    m_.assign(grad.size(), 0.0);
    v_.assign(grad.size(), 0.0);
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::vector<double> out(grad.size());
  for (std::size_t i = 0; i < grad.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    out[i] = cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
  }
  return out;
}

ModelParams PDState::params() const {
  return {phi, psi, rho ? *rho : std::vector<double>{}};
}

PrimalDualStepper::PrimalDualStepper(StepRule primal, StepRule dual, AdamConfig adam)
    : primal_(primal), dual_(dual), primal_adam_(adam), dual_adam_(adam) {}

void PrimalDualStepper::step(PDState& state, const GradEvaluator& eval,
                             std::optional<long> record_epoch) {
  const long epoch = record_epoch.value_or(state.k);
  const Evaluation primal = eval(state.params());
  check_finite(primal, epoch, "primal");

  std::vector<double> phi_next = state.phi;
  const auto& dphi = primal.grads.d_phi;
  if (primal_ == StepRule::convergent) {
    const double eta = step_size(state.k, state.p, norm2(dphi));
    for (std::size_t i = 0; i < phi_next.size(); ++i) phi_next[i] -= eta * dphi[i];
  } else {
    const auto delta = primal_adam_.step(dphi);
    for (std::size_t i = 0; i < phi_next.size(); ++i) phi_next[i] -= delta[i];
  }

  // Dual block: (ρ, Ψ), whichever parts carry gradients.
  const bool has_dual = !primal.grads.d_psi.empty() || primal.grads.d_rho.has_value();
  std::vector<double> psi_next = state.psi;
  std::optional<std::vector<double>> rho_next = state.rho;
  if (has_dual) {
    ModelParams at_next = state.params();
    at_next.phi = phi_next;
    const Evaluation dual = eval(at_next);
    check_finite(dual, epoch, "dual");

    std::vector<double> joint;
    const bool with_rho = dual.grads.d_rho.has_value() && state.rho.has_value();
    const bool with_psi = !dual.grads.d_psi.empty();
    if (with_rho) joint = *dual.grads.d_rho;
    const std::size_t rho_len = joint.size();
    if (with_psi) joint.insert(joint.end(), dual.grads.d_psi.begin(), dual.grads.d_psi.end());

    std::vector<double> delta(joint.size());
    if (dual_ == StepRule::convergent) {
      const double eta = step_size(state.k, state.p, norm2(joint));
      for (std::size_t i = 0; i < joint.size(); ++i) delta[i] = eta * joint[i];
    } else {
      delta = dual_adam_.step(joint);
    }
    if (with_rho) {
      for (std::size_t i = 0; i < rho_len; ++i) (*rho_next)[i] += delta[i];
    }
    if (with_psi) {
      for (std::size_t i = 0; i < psi_next.size(); ++i) psi_next[i] += delta[rho_len + i];
    }
  }

  TraceRecord rec;
  rec.epoch = epoch;
  rec.total = primal.value.total;
  rec.fidelity = primal.value.fidelity;
  rec.penalty = primal.value.lambda * primal.value.penalty_base;
  rec.lambda = primal.value.lambda;
  rec.dphi_norm = distance(phi_next, state.phi);
  rec.dpsi_norm = distance(psi_next, state.psi);
  state.trace.push_back(rec);

  state.phi = std::move(phi_next);
  state.psi = std::move(psi_next);
  state.rho = std::move(rho_next);
  ++state.k;
}

PDState primal_dual_step(PDState state, const GradEvaluator& eval) {
  PrimalDualStepper stepper(StepRule::convergent, StepRule::convergent);
  stepper.step(state, eval);
  return state;
}

ModelBundle make_simulation_bundle(bool learned_lambda, bool infer_environments,
                                   std::uint64_t seed, double fixed_lambda) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    0x1234u};
  std::uint32_t words[6];
  seq.generate(words, words + 6);
  auto seed_of = [&](int i) {
    return (static_cast<std::uint64_t>(words[2 * i]) << 32) | words[2 * i + 1];
  };
  ModelBundle b;
  b.phi = Network::build(simulation_phi_spec(), seed_of(0));
  if (learned_lambda) {
    b.lambda = Network::build(simulation_lambda_spec(b.phi.param_count()), seed_of(1));
  }
  if (infer_environments) b.rho = Network::build(simulation_rho_spec(), seed_of(2));
  b.fixed_lambda = fixed_lambda;
  return b;
}

namespace {

ModelBundle bundle_from(const ModelBundle& like, const PDState& s) {
  ModelBundle out = like;
  out.phi.set_params(s.phi);
  if (out.lambda) out.lambda->set_params(s.psi);
  if (out.rho && s.rho) out.rho->set_params(*s.rho);
  return out;
}

}  // namespace

TrainResult train(ModelBundle model, const std::vector<EnvBatch>& train_envs,
                  const TrainConfig& cfg) {
  std::optional<NetworkSpec> lambda_spec;
  if (model.lambda) lambda_spec = model.lambda->spec();
  if (cfg.objective == ObjectiveKind::g) {
    auto objective = LagrangianObjective::irm(model.phi.spec(), lambda_spec, train_envs,
                                              cfg.flavor, model.fixed_lambda);
    return train(std::move(model), objective, cfg);
  }
  if (!model.rho) throw Error("train: objective h needs an environment-inference network");
  auto objective = LagrangianObjective::minimax(model.phi.spec(), lambda_spec, model.rho->spec(),
                                                pool(train_envs), cfg.flavor, model.fixed_lambda);
  return train(std::move(model), objective, cfg);
}

TrainResult train(ModelBundle model, const LagrangianObjective& objective, const TrainConfig& cfg) {
  if (cfg.anneal_epochs < 0 || cfg.total_epochs < cfg.anneal_epochs) {
    throw Error("train: need 0 <= anneal_epochs <= total_epochs");
  }
  if (objective.learns_lambda() != model.lambda.has_value() ||
      objective.infers_environments() != model.rho.has_value()) {
    throw Error("train: model bundle does not match the objective's roles");
  }

  PDState state;
  state.phi = model.phi.params();
  if (model.lambda) state.psi = model.lambda->params();
  if (model.rho) state.rho = model.rho->params();
  state.p = cfg.p;
  state.k = 1;

  PrimalDualStepper stepper(cfg.primal_rule, cfg.dual_rule, cfg.adam);
  ModelBundle last_good = model;

  auto guarded = [&](GradEvaluator inner) -> GradEvaluator {
    return [&, inner](const ModelParams& params) {
      Evaluation e = inner(params);
      const double total = e.value.total;
      if (!std::isfinite(total) || total > cfg.divergence_limit) {
        throw TrainingDiverged("train: objective diverged (total = " + std::to_string(total) +
                                   ") after epoch " + std::to_string(state.trace.size()),
                               last_good, state.trace);
      }
      return e;
    };
  };

  const GradEvaluator annealing = guarded([&](const ModelParams& params) {
    Evaluation e = objective.evaluate(params, cfg.lambda_init);
    e.grads.d_psi.clear();
    if (cfg.freeze_rho_during_annealing) e.grads.d_rho.reset();
    return e;
  });
  const GradEvaluator adversarial =
      guarded([&](const ModelParams& params) { return objective.evaluate(params); });

  for (long epoch = 1; epoch <= cfg.anneal_epochs; ++epoch) {
    stepper.step(state, annealing, epoch);
    last_good = bundle_from(model, state);
  }
  state.k = 1;
  for (long epoch = cfg.anneal_epochs + 1; epoch <= cfg.total_epochs; ++epoch) {
    stepper.step(state, adversarial, epoch);
    last_good = bundle_from(model, state);
  }

  return {bundle_from(model, state), std::move(state.trace)};
}

}  // namespace oodtv
