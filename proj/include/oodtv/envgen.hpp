#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "oodtv/tensor.hpp"

namespace oodtv {

inline constexpr std::size_t kInvariantDims = 5;
inline constexpr std::size_t kSpuriousDims = 10;
inline constexpr std::size_t kFeatureDims = kInvariantDims + kSpuriousDims;

/// Samples of one environment.
///
/// x is n x 15 (five invariant columns, then ten spurious ones), y is n x 1
/// with labels in {0, 1}, t is n x 1 with the auxiliary time in [0, 1].
/// base_v / base_s keep the scalar latent features the columns were derived
/// from; they are empty for batches read back from CSV.
struct EnvBatch {
  Tensor x;
  Tensor y;
  Tensor t;
  int env_id = 0;
  std::vector<double> base_v;
  std::vector<double> base_s;

  std::size_t size() const noexcept { return y.size(); }
  bool empty() const noexcept { return y.size() == 0; }
};

struct TimeRange {
  double lo = 0.0;
  double hi = 1.0;
};

/// One environment with fixed invariant (p_v) and spurious (p_s) agreement
/// rates. Deterministic in seed.
EnvBatch generate_environment(std::size_t n, double p_v, double p_s, TimeRange t_range,
                              std::uint64_t seed, int env_id = 0);

struct SuiteConfig {
  double p_v = 0.8;
  double p_s_minus = 0.999;  // t in [0, 0.5)
  double p_s_plus = 0.9;     // t in [0.5, 1]
  std::size_t n_train = 2000;  // per training environment
  std::size_t n_test_per_env = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Spurious agreement rates of the four test environments.
inline constexpr double kTestSpuriousRates[] = {0.999, 0.8, 0.2, 0.001};

/// Training environments carry env ids 0 and 1, test environments 2..5.
struct Suite {
  std::vector<EnvBatch> train;
  std::vector<EnvBatch> test;
};

Suite make_suite(const SuiteConfig& cfg);

/// All environments concatenated, keeping sample order.
EnvBatch pool(const std::vector<EnvBatch>& envs);

/// Header x1..x15,y,t,env; values written with 17 significant digits.
void write_csv(std::ostream& os, const std::vector<EnvBatch>& envs);
/// Groups rows by the env column, in order of first appearance.
std::vector<EnvBatch> read_csv(std::istream& is);

}  // namespace oodtv
