#include "oodtv/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "oodtv/precision.hpp"

namespace oodtv {

namespace {

std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(strip(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_real(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw Error(what + ": '" + s + "' is not a number");
  return v;
}

long parse_integer(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw Error(what + ": '" + s + "' is not an integer");
  return v;
}

bool parse_bool(const std::string& s, const std::string& what) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw Error(what + ": '" + s + "' is not a boolean");
}

}  // namespace

MethodSpec parse_method(const std::string& name, std::optional<Flavor> flavor) {
  std::string n = name;
  std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
  std::replace(n.begin(), n.end(), '_', '-');
  MethodSpec m;
  std::string stem = n;
  std::optional<Flavor> suffix;
  if (n == "irm" || n == "zin") {
    suffix = Flavor::l2;
  } else if (n.size() > 3 && (n.ends_with("-l1") || n.ends_with("-l2"))) {
    suffix = parse_flavor(n.substr(n.size() - 2));
    stem = n.substr(0, n.size() - 3);
  }
  if (stem == "irm" || stem == "irm-tv") {
    m = {ObjectiveKind::g, Flavor::l2, false};
  } else if (stem == "ood-tv-irm") {
    m = {ObjectiveKind::g, Flavor::l2, true};
  } else if (stem == "zin" || stem == "minimax-tv") {
    m = {ObjectiveKind::h, Flavor::l2, false};
  } else if (stem == "ood-tv-minimax") {
    m = {ObjectiveKind::h, Flavor::l2, true};
  } else {
    throw Error("unknown method '" + name + "'");
  }
  if (!suffix && !flavor) throw Error("method '" + name + "' needs an -l1/-l2 suffix or a flavor");
  m.flavor = flavor ? *flavor : *suffix;
  return m;
}

std::string method_name(const MethodSpec& m) {
  std::string s = m.learned_lambda ? "ood-tv-" : "";
  s += m.objective == ObjectiveKind::g ? (m.learned_lambda ? "irm" : "irm-tv")
                                       : (m.learned_lambda ? "minimax" : "minimax-tv");
  return s + "-" + to_string(m.flavor);
}

std::vector<std::string> all_method_names() {
  return {"irm-tv-l2",     "irm-tv-l1",     "ood-tv-irm-l2",     "ood-tv-irm-l1",
          "minimax-tv-l2", "minimax-tv-l1", "ood-tv-minimax-l2", "ood-tv-minimax-l1"};
}

ExperimentConfig parse_config(std::istream& is, ExperimentConfig cfg) {
  std::string line;
  int lineno = 0;
  std::optional<std::string> method;
  std::optional<Flavor> flavor;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(lineno);
    if (eq == std::string::npos) throw Error(where + ": expected key = value");
    const std::string key = strip(line.substr(0, eq));
    const std::string val = strip(line.substr(eq + 1));
    const std::string ctx = where + " (" + key + ")";
    try {
      if (key == "method") method = val;
      else if (key == "flavor") flavor = parse_flavor(val);
      else if (key == "seed") cfg.suite.seed = static_cast<std::uint64_t>(parse_integer(val, ctx));
      else if (key == "repetitions") cfg.repetitions = static_cast<int>(parse_integer(val, ctx));
      else if (key == "threads") cfg.threads = static_cast<unsigned>(parse_integer(val, ctx));
      else if (key == "p_v") cfg.suite.p_v = parse_real(val, ctx);
      else if (key == "p_s_minus") cfg.suite.p_s_minus = parse_real(val, ctx);
      else if (key == "p_s_plus") cfg.suite.p_s_plus = parse_real(val, ctx);
      else if (key == "n_train") cfg.suite.n_train = static_cast<std::size_t>(parse_integer(val, ctx));
      else if (key == "n_test_per_env")
        cfg.suite.n_test_per_env = static_cast<std::size_t>(parse_integer(val, ctx));
      else if (key == "anneal_epochs") cfg.train.anneal_epochs = parse_integer(val, ctx);
      else if (key == "total_epochs") cfg.train.total_epochs = parse_integer(val, ctx);
      else if (key == "primal_rule") cfg.train.primal_rule = parse_step_rule(val);
      else if (key == "dual_rule") cfg.train.dual_rule = parse_step_rule(val);
      else if (key == "p") cfg.train.p = parse_real(val, ctx);
      else if (key == "lr") cfg.train.adam.lr = parse_real(val, ctx);
      else if (key == "beta1") cfg.train.adam.beta1 = parse_real(val, ctx);
      else if (key == "beta2") cfg.train.adam.beta2 = parse_real(val, ctx);
      else if (key == "adam_eps") cfg.train.adam.eps = parse_real(val, ctx);
      else if (key == "lambda_init") cfg.train.lambda_init = parse_real(val, ctx);
      else if (key == "fixed_lambda") cfg.fixed_lambda = parse_real(val, ctx);
      else if (key == "freeze_rho") cfg.train.freeze_rho_during_annealing = parse_bool(val, ctx);
      else if (key == "divergence_limit") cfg.train.divergence_limit = parse_real(val, ctx);
      else throw Error("unknown key");
    } catch (const Error& e) {
      const std::string msg = e.what();
      throw Error(msg.rfind(where, 0) == 0 ? msg : ctx + ": " + msg);
    }
  }
  if (method) {
    cfg.method = parse_method(*method, flavor);
  } else if (flavor) {
    cfg.method.flavor = *flavor;
  }
  if (cfg.repetitions < 1) throw Error("config: repetitions must be at least 1");
  cfg.suite.validate();
  return cfg;
}

ExperimentConfig load_config(const std::string& path, ExperimentConfig base) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  return parse_config(in, std::move(base));
}

void write_config(std::ostream& os, const ExperimentConfig& cfg) {
  const auto& t = cfg.train;
  os << "method = " << method_name(cfg.method) << '\n'
     << "seed = " << cfg.suite.seed << '\n'
     << "repetitions = " << cfg.repetitions << '\n'
     << "threads = " << cfg.threads << '\n'
     << "p_v = " << format_exact(cfg.suite.p_v) << '\n'
     << "p_s_minus = " << format_exact(cfg.suite.p_s_minus) << '\n'
     << "p_s_plus = " << format_exact(cfg.suite.p_s_plus) << '\n'
     << "n_train = " << cfg.suite.n_train << '\n'
     << "n_test_per_env = " << cfg.suite.n_test_per_env << '\n'
     << "anneal_epochs = " << t.anneal_epochs << '\n'
     << "total_epochs = " << t.total_epochs << '\n'
     << "primal_rule = " << to_string(t.primal_rule) << '\n'
     << "dual_rule = " << to_string(t.dual_rule) << '\n'
     << "p = " << format_exact(t.p) << '\n'
     << "lr = " << format_exact(t.adam.lr) << '\n'
     << "beta1 = " << format_exact(t.adam.beta1) << '\n'
     << "beta2 = " << format_exact(t.adam.beta2) << '\n'
     << "adam_eps = " << format_exact(t.adam.eps) << '\n'
     << "lambda_init = " << format_exact(t.lambda_init) << '\n'
     << "fixed_lambda = " << format_exact(cfg.fixed_lambda) << '\n'
     << "freeze_rho = " << (t.freeze_rho_during_annealing ? "true" : "false") << '\n'
     << "divergence_limit = " << format_exact(t.divergence_limit) << '\n';
}

Metrics summarize(const std::vector<double>& per_env) {
  if (per_env.empty()) throw Error("evaluate: no test environments");
  Metrics m;
  m.per_env = per_env;
  double s = 0.0;
  for (double a : per_env) s += a;
  m.mean = s / static_cast<double>(per_env.size());
  m.worst = *std::min_element(per_env.begin(), per_env.end());
  return m;
}

Metrics evaluate_predictions(const std::vector<std::vector<int>>& predictions,
                             const std::vector<EnvBatch>& test_envs) {
  if (predictions.size() != test_envs.size()) {
    throw Error("evaluate: prediction sets do not match the environments");
  }
  std::vector<double> acc;
  for (std::size_t e = 0; e < test_envs.size(); ++e) {
    const EnvBatch& env = test_envs[e];
    if (env.empty()) throw Error("evaluate: environment " + std::to_string(env.env_id) + " is empty");
    if (predictions[e].size() != env.size()) {
      throw Error("evaluate: prediction count does not match environment size");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < env.size(); ++i) {
      correct += predictions[e][i] == static_cast<int>(env.y[i]) ? 1 : 0;
    }
    acc.push_back(static_cast<double>(correct) / static_cast<double>(env.size()));
  }
  return summarize(acc);
}

Metrics evaluate(const Network& phi, const std::vector<EnvBatch>& test_envs) {
  std::vector<std::vector<int>> preds;
  for (const auto& env : test_envs) {
    if (env.empty()) throw Error("evaluate: environment " + std::to_string(env.env_id) + " is empty");
    const Tensor logits = oodtv::evaluate(phi, env.x);
    std::vector<int> p(env.size());
    for (std::size_t i = 0; i < env.size(); ++i) p[i] = sigmoid(logits[i]) > 0.5 ? 1 : 0;
    preds.push_back(std::move(p));
  }
  return evaluate_predictions(preds, test_envs);
}

void write_metrics_json(std::ostream& os, const Metrics& m) {
  nlohmann::ordered_json j;
  j["mean"] = round_significant(m.mean);
  j["worst"] = round_significant(m.worst);
  j["per_env"] = nlohmann::json::array();
  for (double a : m.per_env) j["per_env"].push_back(round_significant(a));
  os << j.dump(2) << '\n';
}

Metrics read_metrics_json(std::istream& is) {
  const auto j = nlohmann::json::parse(is);
  Metrics m;
  m.mean = j.at("mean").get<double>();
  m.worst = j.at("worst").get<double>();
  m.per_env = j.at("per_env").get<std::vector<double>>();
  return m;
}

std::vector<EnvBatch> partition_by_time(const EnvBatch& pooled, double cut) {
  const std::size_t d = pooled.x.cols();
  std::vector<double> x[2], y[2], t[2];
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    const int side = pooled.t[i] < cut ? 0 : 1;
    for (std::size_t c = 0; c < d; ++c) x[side].push_back(pooled.x.at(i, c));
    y[side].push_back(pooled.y[i]);
    t[side].push_back(pooled.t[i]);
  }
  std::vector<EnvBatch> out;
  for (int side = 0; side < 2; ++side) {
    const std::size_t n = y[side].size();
    if (n == 0) throw Error("partition_by_time: no samples on one side of t = " + format_significant(cut));
    EnvBatch e;
    e.x = Tensor(Shape{n, d}, std::move(x[side]));
    e.y = Tensor(Shape{n, 1}, std::move(y[side]));
    e.t = Tensor(Shape{n, 1}, std::move(t[side]));
    e.env_id = side;
    out.push_back(std::move(e));
  }
  return out;
}

TrainConfig train_config_for(const ExperimentConfig& cfg) {
  TrainConfig t = cfg.train;
  t.objective = cfg.method.objective;
  t.flavor = cfg.method.flavor;
  return t;
}

ModelBundle fresh_bundle(const ExperimentConfig& cfg, std::uint64_t seed) {
  return make_simulation_bundle(cfg.method.learned_lambda, cfg.method.objective == ObjectiveKind::h,
                                seed, cfg.fixed_lambda);
}

TrainResult train_method(const ExperimentConfig& cfg, const std::vector<EnvBatch>& train_envs,
                         std::uint64_t seed) {
  TrainConfig t = train_config_for(cfg);
  t.seed = seed;
  const EnvBatch pooled = pool(train_envs);
  if (cfg.method.objective == ObjectiveKind::g) {
    return train(fresh_bundle(cfg, seed), partition_by_time(pooled), t);
  }
  return train(fresh_bundle(cfg, seed), {pooled}, t);
}

void aggregate(MethodRow& row) {
  const auto n = static_cast<double>(row.repetitions.size());
  if (row.repetitions.empty()) {
    row.mean = row.mean_std = row.worst = row.worst_std = 0.0;
    return;
  }
  double sm = 0.0, sw = 0.0;
  for (const auto& r : row.repetitions) {
    sm += r.metrics.mean;
    sw += r.metrics.worst;
  }
  row.mean = sm / n;
  row.worst = sw / n;
  double vm = 0.0, vw = 0.0;
  for (const auto& r : row.repetitions) {
    vm += (r.metrics.mean - row.mean) * (r.metrics.mean - row.mean);
    vw += (r.metrics.worst - row.worst) * (r.metrics.worst - row.worst);
  }
  row.mean_std = std::sqrt(vm / n);
  row.worst_std = std::sqrt(vw / n);
}

namespace {

RepetitionRow run_repetition(const ExperimentConfig& cfg, int r) {
  const std::uint64_t seed = cfg.suite.seed + static_cast<std::uint64_t>(r);
  SuiteConfig sc = cfg.suite;
  sc.seed = seed;
  const Suite suite = make_suite(sc);
  const TrainResult trained = train_method(cfg, suite.train, seed);
  return {r, evaluate(trained.model.phi, suite.test)};
}

}  // namespace

MethodRow run_experiment(const ExperimentConfig& cfg) {
  if (cfg.repetitions < 1) throw Error("run_experiment: repetitions must be at least 1");
  cfg.suite.validate();
  MethodRow row;
  row.method = method_name(cfg.method);
  unsigned width = cfg.threads ? cfg.threads : std::max(1u, std::thread::hardware_concurrency());
  width = std::min<unsigned>(width, static_cast<unsigned>(cfg.repetitions));

  for (int start = 0; start < cfg.repetitions; start += static_cast<int>(width)) {
    const int stop = std::min(cfg.repetitions, start + static_cast<int>(width));
    std::vector<std::future<RepetitionRow>> jobs;
    for (int r = start; r < stop; ++r) {
      jobs.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred,
                                run_repetition, std::cref(cfg), r));
    }
    std::string failure;
    for (int r = start; r < stop; ++r) {
      try {
        row.repetitions.push_back(jobs[static_cast<std::size_t>(r - start)].get());
      } catch (const std::exception& e) {
        if (failure.empty()) {
          failure = row.method + ": repetition " + std::to_string(r) + " failed: " + e.what();
        }
      }
    }
    if (!failure.empty()) {
      aggregate(row);
      throw ExperimentAborted(failure, row);
    }
  }
  aggregate(row);
  return row;
}

ResultTable run_experiments(const ExperimentConfig& base, const std::vector<std::string>& methods) {
  ResultTable table;
  for (const auto& name : methods) {
    ExperimentConfig cfg = base;
    cfg.method = parse_method(name);
    table.rows.push_back(run_experiment(cfg));
  }
  return table;
}

namespace {

const char* kSummaryHeader = "method,mean,mean_std,worst,worst_std";
const char* kRepetitionHeader = "method,repetition,env0,env1,env2,env3,mean,worst";

void write_summary_rows(std::ostream& os, const ResultTable& table) {
  os << kSummaryHeader << '\n';
  for (const auto& r : table.rows) {
    os << r.method << ',' << format_significant(r.mean) << ',' << format_significant(r.mean_std)
       << ',' << format_significant(r.worst) << ',' << format_significant(r.worst_std) << '\n';
  }
}

MethodRow& row_for(ResultTable& table, const std::string& method) {
  for (auto& r : table.rows) {
    if (r.method == method) return r;
  }
  table.rows.push_back({});
  table.rows.back().method = method;
  return table.rows.back();
}

void read_summary_line(ResultTable& table, const std::string& line, int lineno) {
  const auto f = split(line, ',');
  const std::string where = "results csv line " + std::to_string(lineno);
  if (f.size() != 5) throw Error(where + ": expected 5 fields");
  MethodRow& r = row_for(table, f[0]);
  r.mean = parse_real(f[1], where);
  r.mean_std = parse_real(f[2], where);
  r.worst = parse_real(f[3], where);
  r.worst_std = parse_real(f[4], where);
}

}  // namespace

void write_summary_csv(std::ostream& os, const ResultTable& table) { write_summary_rows(os, table); }

void write_repetitions_csv(std::ostream& os, const ResultTable& table) {
  os << kRepetitionHeader << '\n';
  for (const auto& row : table.rows) {
    for (const auto& rep : row.repetitions) {
      if (rep.metrics.per_env.size() != 4) {
        throw Error("results csv: expected four test environments, got " +
                    std::to_string(rep.metrics.per_env.size()));
      }
      os << row.method << ',' << rep.repetition;
      for (double a : rep.metrics.per_env) os << ',' << format_significant(a);
      os << ',' << format_significant(rep.metrics.mean) << ','
         << format_significant(rep.metrics.worst) << '\n';
    }
  }
  os << '\n';
  write_summary_rows(os, table);
}

ResultTable read_summary_csv(std::istream& is) {
  ResultTable table;
  std::string line;
  int lineno = 1;
  if (!std::getline(is, line) || strip(line) != kSummaryHeader) {
    throw Error("results csv: missing header '" + std::string(kSummaryHeader) + "'");
  }
  while (std::getline(is, line)) {
    ++lineno;
    if (strip(line).empty()) continue;
    read_summary_line(table, strip(line), lineno);
  }
  return table;
}

ResultTable read_repetitions_csv(std::istream& is) {
  ResultTable table;
  std::string line;
  int lineno = 1;
  if (!std::getline(is, line) || strip(line) != kRepetitionHeader) {
    throw Error("results csv: missing header '" + std::string(kRepetitionHeader) + "'");
  }
  bool footer = false;
  while (std::getline(is, line)) {
    ++lineno;
    line = strip(line);
    if (line.empty()) continue;
    if (line == kSummaryHeader) {
      footer = true;
      continue;
    }
    if (footer) {
      read_summary_line(table, line, lineno);
      continue;
    }
    const auto f = split(line, ',');
    const std::string where = "results csv line " + std::to_string(lineno);
    if (f.size() != 8) throw Error(where + ": expected 8 fields");
    RepetitionRow rep;
    rep.repetition = static_cast<int>(parse_integer(f[1], where));
    for (int e = 0; e < 4; ++e) rep.metrics.per_env.push_back(parse_real(f[2 + e], where));
    rep.metrics.mean = parse_real(f[6], where);
    rep.metrics.worst = parse_real(f[7], where);
    row_for(table, f[0]).repetitions.push_back(std::move(rep));
  }
  return table;
}

void write_checkpoint(std::ostream& os, const ModelBundle& model) {
  os << "oodtv-checkpoint 1\n";
  os << "fixed_lambda " << format_exact(model.fixed_lambda) << '\n';
  write_network(os, "phi", model.phi);
  if (model.lambda) write_network(os, "lambda", *model.lambda);
  if (model.rho) write_network(os, "rho", *model.rho);
}

ModelBundle read_checkpoint(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "oodtv-checkpoint") {
    throw Error("checkpoint: missing 'oodtv-checkpoint' header");
  }
  if (version != 1) throw Error("checkpoint: unsupported version " + std::to_string(version));
  std::string key, value;
  if (!(is >> key >> value) || key != "fixed_lambda") throw Error("checkpoint: missing fixed_lambda");
  const double fixed = parse_real(value, "checkpoint fixed_lambda");

  std::map<std::string, Network> nets;
  while (is >> std::ws && is.peek() != EOF) {
    std::string name;
    Network net = read_network(is, name);
    if (!nets.emplace(name, std::move(net)).second) {
      throw Error("checkpoint: duplicate network '" + name + "'");
    }
  }
  auto phi = nets.find("phi");
  if (phi == nets.end()) throw Error("checkpoint: no 'phi' network");
  ModelBundle b{phi->second, std::nullopt, std::nullopt, fixed};
  for (auto& [name, net] : nets) {
    if (name == "lambda") b.lambda = net;
    else if (name == "rho") b.rho = net;
    else if (name != "phi") throw Error("checkpoint: unexpected network '" + name + "'");
  }
  return b;
}

void save_checkpoint(const std::string& path, const ModelBundle& model) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, model);
}

ModelBundle load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace oodtv
