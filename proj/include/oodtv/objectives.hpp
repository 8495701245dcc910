#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "oodtv/autodiff.hpp"
#include "oodtv/envgen.hpp"
#include "oodtv/network.hpp"

namespace oodtv {

/// ℓ1: squared mean of |dR/dw| over environments. ℓ2: mean of (dR/dw)^2.
enum class Flavor { l1, l2 };

std::string to_string(Flavor f);
Flavor parse_flavor(const std::string& s);

/// Denominator of an inferred environment's weighted risk.
enum class RiskNormalization {
  weight_sum,    // sum_j rho_i(z_j); a vertex rho recovers hard-partition risks
  sample_count,  // n
};

/// fidelity + lambda * penalty_base == total.
struct LagrangianBreakdown {
  double fidelity = 0.0;
  double penalty_base = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

struct GradBundle {
  std::vector<double> d_phi;
  std::vector<double> d_psi;  // empty when the penalty strength is a constant
  std::optional<std::vector<double>> d_rho;
};

/// Mean binary cross-entropy of logits w * Φ(x) against the labels.
double empirical_risk(const Network& phi, double w, const EnvBatch& env);

/// dR(w∘Φ)/dw at w = 1, i.e. mean((σ(f) - y) f) with f = Φ(x).
double grad_w_risk(const Network& phi, const EnvBatch& env);

// Tape forms, built from the logits f = Φ(x) of one batch.
Var empirical_risk(const Var& logits, const Tensor& labels);
Var grad_w_risk(const Var& logits, const Tensor& labels);

/// sum_i weights_i * |grad_i|; linear in the weights.
double tv_expectation(std::span<const double> grad_magnitudes, std::span<const double> weights);

// subgrad_abs(v) is declared in autodiff.hpp; the tape's abs node uses it too.

/// The four tape nodes of a Lagrangian plus the per-environment dR/dw.
struct LagrangianTerms {
  Var fidelity;
  Var penalty_base;
  Var lambda;
  Var total;
  std::vector<Var> grad_w;
};

/// g on ground-truth environments with uniform environment weights.
LagrangianTerms g_terms(const BoundNetwork& phi, const Var& lambda,
                        const std::vector<EnvBatch>& envs, Flavor flavor);

/// h on pooled samples; `weights` holds one (n x 1) column per inferred
/// environment. The fidelity averages inferred-environment risks uniformly;
/// the penalty weights them by each environment's mean mass.
LagrangianTerms h_terms(const BoundNetwork& phi, const Var& lambda,
                        const std::vector<Var>& weights, const EnvBatch& pooled, Flavor flavor,
                        RiskNormalization norm = RiskNormalization::weight_sum);

LagrangianBreakdown lagrangian_g(const Network& phi, const Network& lambda_net,
                                 const std::vector<EnvBatch>& envs, Flavor flavor);
LagrangianBreakdown lagrangian_g(const Network& phi, double fixed_lambda,
                                 const std::vector<EnvBatch>& envs, Flavor flavor);

LagrangianBreakdown lagrangian_h(const Network& phi, const Network& lambda_net,
                                 const Network& rho_net, const EnvBatch& pooled, Flavor flavor,
                                 RiskNormalization norm = RiskNormalization::weight_sum);
LagrangianBreakdown lagrangian_h(const Network& phi, double fixed_lambda, const Network& rho_net,
                                 const EnvBatch& pooled, Flavor flavor,
                                 RiskNormalization norm = RiskNormalization::weight_sum);

GradBundle grads_g(const Network& phi, const Network& lambda_net,
                   const std::vector<EnvBatch>& envs, Flavor flavor);
GradBundle grads_h(const Network& phi, const Network& lambda_net, const Network& rho_net,
                   const EnvBatch& pooled, Flavor flavor,
                   RiskNormalization norm = RiskNormalization::weight_sum);

/// Flat parameters of the three roles. psi is empty when λ is a constant and
/// rho is empty for objectives on ground-truth environments.
struct ModelParams {
  std::vector<double> phi;
  std::vector<double> psi;
  std::vector<double> rho;
};

struct Evaluation {
  LagrangianBreakdown value;
  GradBundle grads;
};

/// g or h bound to its data and architectures, evaluated at flat parameters.
class LagrangianObjective {
 public:
  /// g over ground-truth environments. Without a λ spec the penalty strength
  /// is `fixed_lambda`.
  static LagrangianObjective irm(NetworkSpec phi, std::optional<NetworkSpec> lambda,
                                 std::vector<EnvBatch> envs, Flavor flavor,
                                 double fixed_lambda = 1.0);
  /// h over pooled samples with the auxiliary variable fed to ρ.
  static LagrangianObjective minimax(NetworkSpec phi, std::optional<NetworkSpec> lambda,
                                     NetworkSpec rho, EnvBatch pooled, Flavor flavor,
                                     double fixed_lambda = 1.0,
                                     RiskNormalization norm = RiskNormalization::weight_sum);

  /// `lambda_override` replaces λ(Ψ,Φ) by a constant (annealing phase).
  Evaluation evaluate(const ModelParams& params, std::optional<double> lambda_override = {},
                      bool with_grads = true) const;

  bool learns_lambda() const noexcept { return lambda_spec_.has_value(); }
  bool infers_environments() const noexcept { return rho_spec_.has_value(); }
  const NetworkSpec& phi_spec() const noexcept { return phi_spec_; }
  const std::optional<NetworkSpec>& lambda_spec() const noexcept { return lambda_spec_; }
  const std::optional<NetworkSpec>& rho_spec() const noexcept { return rho_spec_; }
  Flavor flavor() const noexcept { return flavor_; }
  double fixed_lambda() const noexcept { return fixed_lambda_; }

 private:
  LagrangianObjective() = default;

  NetworkSpec phi_spec_;
  std::optional<NetworkSpec> lambda_spec_;
  std::optional<NetworkSpec> rho_spec_;
  std::vector<EnvBatch> envs_;  // ground-truth environments, or one pooled batch
  Flavor flavor_ = Flavor::l1;
  double fixed_lambda_ = 1.0;
  RiskNormalization norm_ = RiskNormalization::weight_sum;
};

struct SemiNashReport {
  bool item1_ok = false;
  bool item2_ok = false;
  /// Largest amount by which either condition is violated; 0 when both hold.
  double worst_violation = 0.0;
  double item1_violation = 0.0;
  double item2_violation = 0.0;
};

/// g(Ψ, Φ) for the diagnostic.
using PairEvaluator =
    std::function<double(std::span<const double> psi, std::span<const double> phi)>;

/// Grid check of the two equilibrium conditions at (Ψ*, Φ*):
///   1. g(Ψ*, Φ*) >= g(Ψ, Φ*) - tol for every grid Ψ;
///   2. G(Φ*) <= G(Φ) + tol for every grid Φ, where G(Φ) = max over grid Ψ of
///      g(Ψ, Φ). Only the penalty depends on Ψ, so this argmax is also the
///      argmax of the penalty term.
SemiNashReport semi_nash_check(const PairEvaluator& g, const std::vector<double>& phi_star,
                               const std::vector<double>& psi_star,
                               const std::vector<std::vector<double>>& phi_grid,
                               const std::vector<std::vector<double>>& psi_grid, double tol);

}  // namespace oodtv
