#include "oodtv/envgen.hpp"

#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>

namespace oodtv {

namespace {

void check_probability(double p, const char* name, bool allow_zero) {
  const bool ok = allow_zero ? (p >= 0.0 && p <= 1.0) : (p > 0.0 && p <= 1.0);
  if (!ok) {
    throw Error(std::string("envgen: ") + name + " = " + std::to_string(p) + " is out of range");
  }
}

double sign(double v) { return v >= 0.0 ? 1.0 : -1.0; }

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), 0x9e3779b9u};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

EnvBatch generate_environment(std::size_t n, double p_v, double p_s, TimeRange t_range,
                              std::uint64_t seed, int env_id) {
  check_probability(p_v, "p_v", false);
  check_probability(p_s, "p_s", true);
  if (!(t_range.lo >= 0.0 && t_range.lo <= t_range.hi && t_range.hi <= 1.0)) {
    throw Error("envgen: invalid time range [" + std::to_string(t_range.lo) + ", " +
                std::to_string(t_range.hi) + "]");
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  EnvBatch env;
  env.env_id = env_id;
  env.x = Tensor(Shape{n, kFeatureDims});
  env.y = Tensor(Shape{n, 1});
  env.t = Tensor(Shape{n, 1});
  env.base_v.resize(n);
  env.base_s.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const double mode = unit(rng) < 0.5 ? 1.0 : -1.0;
    const double xv = mode + normal(rng);
    const double label = unit(rng) < p_v ? sign(xv) : -sign(xv);
    const double spurious_mean = unit(rng) < p_s ? label : -label;
    const double xs = spurious_mean + normal(rng);

    for (std::size_t j = 0; j < kInvariantDims; ++j) env.x.at(i, j) = xv + normal(rng);
    for (std::size_t j = 0; j < kSpuriousDims; ++j) {
      env.x.at(i, kInvariantDims + j) = xs + normal(rng);
    }
    env.y[i] = label > 0.0 ? 1.0 : 0.0;
    env.t[i] = t_range.lo + (t_range.hi - t_range.lo) * unit(rng);
    env.base_v[i] = xv;
    env.base_s[i] = xs;
  }
  return env;
}

void SuiteConfig::validate() const {
  check_probability(p_v, "p_v", false);
  check_probability(p_s_minus, "p_s_minus", true);
  check_probability(p_s_plus, "p_s_plus", true);
  if (n_train == 0 || n_test_per_env == 0) throw Error("envgen: sample counts must be positive");
}

Suite make_suite(const SuiteConfig& cfg) {
  cfg.validate();
  Suite suite;
  suite.train.push_back(generate_environment(cfg.n_train, cfg.p_v, cfg.p_s_minus, {0.0, 0.5},
                                             derive_seed(cfg.seed, 0), 0));
  suite.train.push_back(generate_environment(cfg.n_train, cfg.p_v, cfg.p_s_plus, {0.5, 1.0},
                                             derive_seed(cfg.seed, 1), 1));
  int id = 0;
  for (double p_s : kTestSpuriousRates) {
    suite.test.push_back(generate_environment(cfg.n_test_per_env, cfg.p_v, p_s, {0.0, 1.0},
                                              derive_seed(cfg.seed, 100 + id), 2 + id));
    ++id;
  }
  return suite;
}

EnvBatch pool(const std::vector<EnvBatch>& envs) {
  if (envs.empty()) throw Error("pool: no environments");
  std::size_t n = 0;
  const std::size_t d = envs.front().x.cols();
  bool has_base = true;
  for (const auto& e : envs) {
    if (e.x.cols() != d) throw ShapeError("pool: environments disagree on feature count");
    n += e.size();
    has_base = has_base && e.base_v.size() == e.size();
  }
  EnvBatch out;
  out.env_id = -1;
  std::vector<double> x, y, t;
  x.reserve(n * d);
  y.reserve(n);
  t.reserve(n);
  for (const auto& e : envs) {
    x.insert(x.end(), e.x.data().begin(), e.x.data().end());
    y.insert(y.end(), e.y.data().begin(), e.y.data().end());
    t.insert(t.end(), e.t.data().begin(), e.t.data().end());
    if (has_base) {
      out.base_v.insert(out.base_v.end(), e.base_v.begin(), e.base_v.end());
      out.base_s.insert(out.base_s.end(), e.base_s.begin(), e.base_s.end());
    }
  }
  out.x = Tensor(Shape{n, d}, std::move(x));
  out.y = Tensor(Shape{n, 1}, std::move(y));
  out.t = Tensor(Shape{n, 1}, std::move(t));
  return out;
}

void write_csv(std::ostream& os, const std::vector<EnvBatch>& envs) {
  for (std::size_t j = 1; j <= kFeatureDims; ++j) os << 'x' << j << ',';
  os << "y,t,env\n";
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf;
  };
  for (const auto& e : envs) {
    if (e.x.cols() != kFeatureDims) throw ShapeError("write_csv: expected 15 feature columns");
    for (std::size_t i = 0; i < e.size(); ++i) {
      for (std::size_t j = 0; j < kFeatureDims; ++j) {
        put(e.x.at(i, j));
        os << ',';
      }
      os << static_cast<int>(e.y[i]) << ',';
      put(e.t[i]);
      os << ',' << e.env_id << '\n';
    }
  }
}

std::vector<EnvBatch> read_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw Error("read_csv: empty input");
  {
    std::ostringstream expected;
    for (std::size_t j = 1; j <= kFeatureDims; ++j) expected << 'x' << j << ',';
    expected << "y,t,env";
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expected.str()) throw Error("read_csv: unexpected header '" + line + "'");
  }

  struct Columns {
    std::vector<double> x, y, t;
  };
  std::vector<int> order;
  std::map<int, Columns> by_env;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    std::vector<double> fields;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) {
        throw Error("read_csv: line " + std::to_string(line_no) + ": bad number '" + cell + "'");
      }
      fields.push_back(v);
    }
    if (fields.size() != kFeatureDims + 3) {
      throw Error("read_csv: line " + std::to_string(line_no) + " has " +
                  std::to_string(fields.size()) + " fields");
    }
    const double label = fields[kFeatureDims];
    if (label != 0.0 && label != 1.0) {
      throw Error("read_csv: line " + std::to_string(line_no) + ": label must be 0 or 1");
    }
    const int env = static_cast<int>(fields[kFeatureDims + 2]);
    if (!by_env.count(env)) order.push_back(env);
    Columns& c = by_env[env];
    c.x.insert(c.x.end(), fields.begin(), fields.begin() + kFeatureDims);
    c.y.push_back(label);
    c.t.push_back(fields[kFeatureDims + 1]);
  }

  std::vector<EnvBatch> envs;
  for (int id : order) {
    Columns& c = by_env[id];
    EnvBatch e;
    e.env_id = id;
    const std::size_t n = c.y.size();
    e.x = Tensor(Shape{n, kFeatureDims}, std::move(c.x));
    e.y = Tensor(Shape{n, 1}, std::move(c.y));
    e.t = Tensor(Shape{n, 1}, std::move(c.t));
    envs.push_back(std::move(e));
  }
  return envs;
}

}  // namespace oodtv
