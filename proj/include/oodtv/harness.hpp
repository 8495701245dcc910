#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "oodtv/pd_optimizer.hpp"

namespace oodtv {

/// What a method name fixes: objective, penalty flavor, and whether λ is a
/// trained network or a constant.
struct MethodSpec {
  ObjectiveKind objective = ObjectiveKind::g;
  Flavor flavor = Flavor::l1;
  bool learned_lambda = false;
};

/// Accepts irm, irm-tv-l1, irm-tv-l2, ood-tv-irm-l1, ood-tv-irm-l2, zin,
/// minimax-tv-l1, minimax-tv-l2, ood-tv-minimax-l1, ood-tv-minimax-l2.
/// `flavor` overrides the suffix (bare irm / zin are ℓ2).
MethodSpec parse_method(const std::string& name, std::optional<Flavor> flavor = {});
std::string method_name(const MethodSpec& m);
std::vector<std::string> all_method_names();

struct ExperimentConfig {
  MethodSpec method;
  SuiteConfig suite;
  TrainConfig train;
  int repetitions = 10;
  double fixed_lambda = 1.0;
  /// Upper bound on repetitions trained at once; 0 means one per hardware thread.
  unsigned threads = 0;
};

/// key = value lines; '#' starts a comment. Unknown keys and unparsable
/// values raise Error naming the line.
ExperimentConfig parse_config(std::istream& is, ExperimentConfig base = {});
ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {});
void write_config(std::ostream& os, const ExperimentConfig& cfg);

struct Metrics {
  double mean = 0.0;
  double worst = 0.0;
  std::vector<double> per_env;
};

/// Accuracy of thresholding sigmoid(Φ(x)) at 0.5, per environment.
Metrics evaluate(const Network& phi, const std::vector<EnvBatch>& test_envs);
/// Same from explicit 0/1 predictions, one vector per environment.
Metrics evaluate_predictions(const std::vector<std::vector<int>>& predictions,
                             const std::vector<EnvBatch>& test_envs);
Metrics summarize(const std::vector<double>& per_env);

void write_metrics_json(std::ostream& os, const Metrics& m);
Metrics read_metrics_json(std::istream& is);

/// IRM variants see the training data split at t < 0.5.
std::vector<EnvBatch> partition_by_time(const EnvBatch& pooled, double cut = 0.5);

TrainConfig train_config_for(const ExperimentConfig& cfg);
ModelBundle fresh_bundle(const ExperimentConfig& cfg, std::uint64_t seed);
/// One training run on the given training environments.
TrainResult train_method(const ExperimentConfig& cfg, const std::vector<EnvBatch>& train_envs,
                         std::uint64_t seed);

struct RepetitionRow {
  int repetition = 0;
  Metrics metrics;
};

struct MethodRow {
  std::string method;
  double mean = 0.0;
  double mean_std = 0.0;  // population std over repetitions
  double worst = 0.0;
  double worst_std = 0.0;
  std::vector<RepetitionRow> repetitions;
};

struct ResultTable {
  std::vector<MethodRow> rows;
};

/// Mean and population std of per-repetition mean and worst accuracies.
void aggregate(MethodRow& row);

/// Repetition r (0-based) uses seed cfg.suite.seed + r for both data and
/// network initialization.
MethodRow run_experiment(const ExperimentConfig& cfg);
ResultTable run_experiments(const ExperimentConfig& base, const std::vector<std::string>& methods);

/// Raised when a repetition fails; carries the repetitions that finished.
class ExperimentAborted : public Error {
 public:
  ExperimentAborted(const std::string& what, MethodRow partial)
      : Error(what), partial_(std::move(partial)) {}
  const MethodRow& partial() const noexcept { return partial_; }

 private:
  MethodRow partial_;
};

/// method,mean,mean_std,worst,worst_std with 6 significant digits.
void write_summary_csv(std::ostream& os, const ResultTable& table);
/// method,repetition,env0..env3,mean,worst, a blank line, then the summary
/// block as the footer.
void write_repetitions_csv(std::ostream& os, const ResultTable& table);
ResultTable read_summary_csv(std::istream& is);
ResultTable read_repetitions_csv(std::istream& is);

/// Checkpoint: "oodtv-checkpoint 1", a fixed_lambda line, then network
/// blocks named phi, lambda and rho (the last two when present).
void write_checkpoint(std::ostream& os, const ModelBundle& model);
ModelBundle read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const ModelBundle& model);
ModelBundle load_checkpoint(const std::string& path);

}  // namespace oodtv
