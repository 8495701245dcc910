#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "oodtv/objectives.hpp"

namespace oodtv {

/// One epoch of training, as plotted in adversarial-learning traces.
struct TraceRecord {
  long epoch = 0;
  double total = 0.0;
  double fidelity = 0.0;
  double penalty = 0.0;  // lambda * penalty_base
  double lambda = 0.0;
  double dphi_norm = 0.0;
  double dpsi_norm = 0.0;
};

using TrainTrace = std::vector<TraceRecord>;

/// Trace as JSON lines with fields epoch,total,fidelity,penalty,lambda,
/// dphi_norm,dpsi_norm; reals carry 6 significant digits.
void write_trace_jsonl(std::ostream& os, const TrainTrace& trace);
TrainTrace read_trace_jsonl(std::istream& is);

/// 1 / (k^p * grad_norm), or 0 when grad_norm == 0. Requires p > 1.
double step_size(long k, double p, double grad_norm);

/// Smallest integer N with N > ((p - 1) eps)^(-1 / (p - 1)) + 1.
long iterations_for_tolerance(double p, double eps);

enum class StepRule {
  convergent,  // normalized 1/k^p steps
  adam,
};

std::string to_string(StepRule r);
StepRule parse_step_rule(const std::string& s);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment state for one parameter vector.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  /// Returns the update direction scaled by the learning rate; callers add it
  /// (ascent) or subtract it (descent).
  std::vector<double> step(const std::vector<double>& grad);

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  long t_ = 0;
};

struct PDState {
  std::vector<double> phi;
  std::vector<double> psi;
  std::optional<std::vector<double>> rho;
  long k = 1;
  double p = 2.0;
  TrainTrace trace;

  ModelParams params() const;
};

/// Gradient oracle for the step: value and (sub)gradients at given parameters.
using GradEvaluator = std::function<Evaluation(const ModelParams&)>;

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

/// One primal-dual iteration with the convergent schedule:
///   Φ ← Φ - η1 ∂Φ L(Ψ, ρ, Φ)
///   (ρ, Ψ) ← (ρ, Ψ) + η2 ∇(ρ,Ψ) L(Ψ, ρ, Φ_new)
/// The dual gradient is taken at the updated Φ. Appends one trace record
/// (epoch = k) and increments k.
PDState primal_dual_step(PDState state, const GradEvaluator& eval);

/// Step with configurable rules on each side; holds Adam moments across calls.
class PrimalDualStepper {
 public:
  PrimalDualStepper(StepRule primal, StepRule dual, AdamConfig adam = {});

  /// `record_epoch` overrides the trace epoch (defaults to state.k).
  void step(PDState& state, const GradEvaluator& eval, std::optional<long> record_epoch = {});

 private:
  StepRule primal_;
  StepRule dual_;
  Adam primal_adam_;
  Adam dual_adam_;
};

enum class ObjectiveKind { g, h };

struct TrainConfig {
  ObjectiveKind objective = ObjectiveKind::g;
  Flavor flavor = Flavor::l1;
  long anneal_epochs = 2000;
  long total_epochs = 2400;
  StepRule primal_rule = StepRule::adam;
  StepRule dual_rule = StepRule::convergent;
  double p = 2.0;
  AdamConfig adam;
  double lambda_init = 1.0;
  /// Keep ρ at its initialization during annealing (Ψ is always frozen there).
  bool freeze_rho_during_annealing = true;
  double divergence_limit = 1e8;
  std::uint64_t seed = 0;
};

struct ModelBundle {
  Network phi;
  std::optional<Network> lambda;  // learned penalty strength; absent → fixed_lambda
  std::optional<Network> rho;     // environment inference; required for h
  double fixed_lambda = 1.0;
};

/// Simulation architectures, initialized from one seed.
ModelBundle make_simulation_bundle(bool learned_lambda, bool infer_environments,
                                   std::uint64_t seed, double fixed_lambda = 1.0);

/// Raised when the total becomes non-finite or exceeds the divergence limit.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, ModelBundle last_good, TrainTrace trace)
      : Error(what), last_good_(std::move(last_good)), trace_(std::move(trace)) {}
  const ModelBundle& last_good() const noexcept { return last_good_; }
  const TrainTrace& trace() const noexcept { return trace_; }

 private:
  ModelBundle last_good_;
  TrainTrace trace_;
};

struct TrainResult {
  ModelBundle model;
  TrainTrace trace;
};

/// Annealing for epochs 1..A (fixed lambda_init, Ψ frozen), then primal-dual
/// iterations for epochs A+1..T with the step counter k restarting at 1.
/// Objective g uses the training environments directly; h pools them and
/// feeds the auxiliary time to ρ.
TrainResult train(ModelBundle model, const std::vector<EnvBatch>& train_envs,
                  const TrainConfig& cfg);

/// Same, against an already-built objective.
TrainResult train(ModelBundle model, const LagrangianObjective& objective, const TrainConfig& cfg);

}  // namespace oodtv
