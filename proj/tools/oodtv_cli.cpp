#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oodtv/harness.hpp"
#include "oodtv/precision.hpp"

namespace fs = std::filesystem;
using namespace oodtv;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string method;
  std::string flavor;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool with_method) {
  cmd->add_option("--config", c.config, "key = value experiment config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--out", c.out, "output path");
  if (with_method) {
    cmd->add_option("--method", c.method, "method name, e.g. ood-tv-irm-l1");
    cmd->add_option("--flavor", c.flavor, "penalty flavor: l1 or l2");
  }
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg;
  cfg.method = parse_method("ood-tv-irm-l1");
  if (!c.config.empty()) cfg = load_config(c.config, cfg);
  std::optional<Flavor> flavor;
  if (!c.flavor.empty()) flavor = parse_flavor(c.flavor);
  if (!c.method.empty() && c.method != "all" && c.method.find(',') == std::string::npos) {
    cfg.method = parse_method(c.method, flavor);
  } else if (flavor) {
    cfg.method.flavor = *flavor;
  }
  if (c.seed) cfg.suite.seed = *c.seed;
  return cfg;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  return out;
}

std::vector<EnvBatch> load_data(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  return read_csv(in);
}

std::string sibling(const std::string& path, const std::string& suffix) {
  fs::path p(path);
  return (p.parent_path() / (p.stem().string() + suffix)).string();
}

template <class Fn>
void emit(const std::string& path, Fn&& write) {
  if (path.empty()) {
    write(std::cout);
  } else {
    auto out = open_out(path);
    write(out);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Total-variation IRM objectives, primal-dual training and simulation experiments"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, exp_c, nash_c;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset as CSV");
  add_common(gen, gen_c, false);
  gen->get_option("--out")->required();
  std::string split = "train";
  gen->add_option("--split", split, "train, test or all")
      ->check(CLI::IsMember({"train", "test", "all"}));

  auto* tr = app.add_subcommand("train", "train one model; write a checkpoint and a trace");
  add_common(tr, train_c, true);
  std::string train_data, trace_path;
  std::optional<long> anneal, total;
  tr->add_option("--data", train_data, "training dataset CSV")->required();
  tr->add_option("--trace", trace_path, "trace JSONL path (default <out stem>.trace.jsonl)");
  tr->add_option("--anneal-epochs", anneal, "annealing epochs");
  tr->add_option("--total-epochs", total, "total epochs");

  auto* ev = app.add_subcommand("evaluate", "accuracy of a checkpoint on a dataset; metrics JSON");
  add_common(ev, eval_c, false);
  std::string ckpt_path, eval_data;
  ev->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "dataset CSV; each env is one test environment")->required();

  auto* ex = app.add_subcommand("experiment", "repeated runs; summary CSV");
  add_common(ex, exp_c, true);
  ex->get_option("--out")->required();
  std::optional<int> reps;
  std::optional<unsigned> threads;
  ex->add_option("--repetitions", reps, "repetitions per method");
  ex->add_option("--threads", threads, "concurrent repetitions (0 = hardware threads)");

  auto* sn = app.add_subcommand("seminash", "grid check on g(psi, phi) = phi^2 - (psi - phi)^2");
  add_common(sn, nash_c, false);
  double phi_star = 0.0, psi_star = 0.0, lo = -1.0, hi = 1.0, tol = 1e-6;
  int steps = 41;
  sn->add_option("--phi-star", phi_star, "candidate primal point");
  sn->add_option("--psi-star", psi_star, "candidate dual point");
  sn->add_option("--grid-min", lo, "grid lower end");
  sn->add_option("--grid-max", hi, "grid upper end");
  sn->add_option("--grid-steps", steps, "grid points per axis")->check(CLI::PositiveNumber);
  sn->add_option("--tol", tol, "tolerance");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const ExperimentConfig cfg = resolve(gen_c);
      const Suite suite = make_suite(cfg.suite);
      std::vector<EnvBatch> envs;
      if (split != "test") envs.insert(envs.end(), suite.train.begin(), suite.train.end());
      if (split != "train") envs.insert(envs.end(), suite.test.begin(), suite.test.end());
      auto out = open_out(gen_c.out);
      write_csv(out, envs);
    } else if (*tr) {
      ExperimentConfig cfg = resolve(train_c);
      if (anneal) cfg.train.anneal_epochs = *anneal;
      if (total) cfg.train.total_epochs = *total;
      const std::string out = train_c.out.empty() ? "model.ckpt" : train_c.out;
      const std::string trace = trace_path.empty() ? sibling(out, ".trace.jsonl") : trace_path;
      const TrainResult result = train_method(cfg, load_data(train_data), cfg.suite.seed);
      save_checkpoint(out, result.model);
      auto t = open_out(trace);
      write_trace_jsonl(t, result.trace);
    } else if (*ev) {
      const ModelBundle model = load_checkpoint(ckpt_path);
      const Metrics m = evaluate(model.phi, load_data(eval_data));
      emit(eval_c.out, [&](std::ostream& os) { write_metrics_json(os, m); });
    } else if (*ex) {
      ExperimentConfig cfg = resolve(exp_c);
      if (reps) cfg.repetitions = *reps;
      if (threads) cfg.threads = *threads;
      std::vector<std::string> methods;
      if (exp_c.method == "all") {
        for (const auto& name : all_method_names()) {
          methods.push_back(method_name(parse_method(name, exp_c.flavor.empty()
                                                               ? std::nullopt
                                                               : std::optional(parse_flavor(exp_c.flavor)))));
        }
      } else {
        std::istringstream list(exp_c.method.empty() ? method_name(cfg.method) : exp_c.method);
        for (std::string name; std::getline(list, name, ',');) {
          methods.push_back(method_name(parse_method(
              name, exp_c.flavor.empty() ? std::nullopt : std::optional(parse_flavor(exp_c.flavor)))));
        }
      }
      ResultTable table;
      for (const auto& name : methods) {
        ExperimentConfig one = cfg;
        one.method = parse_method(name);
        try {
          table.rows.push_back(run_experiment(one));
        } catch (const ExperimentAborted& e) {
          table.rows.push_back(e.partial());
          emit(sibling(exp_c.out, ".reps.csv"),
               [&](std::ostream& os) { write_repetitions_csv(os, table); });
          throw;
        }
      }
      emit(exp_c.out, [&](std::ostream& os) { write_summary_csv(os, table); });
      emit(sibling(exp_c.out, ".reps.csv"), [&](std::ostream& os) { write_repetitions_csv(os, table); });
      emit(sibling(exp_c.out, ".config.txt"), [&](std::ostream& os) { write_config(os, cfg); });
    } else if (*sn) {
      auto g = [](std::span<const double> psi, std::span<const double> phi) {
        return phi[0] * phi[0] - (psi[0] - phi[0]) * (psi[0] - phi[0]);
      };
      std::vector<std::vector<double>> grid;
      for (int i = 0; i < steps; ++i) {
        grid.push_back({steps == 1 ? lo : lo + (hi - lo) * i / (steps - 1)});
      }
      const SemiNashReport r = semi_nash_check(g, {phi_star}, {psi_star}, grid, grid, tol);
      nlohmann::ordered_json j;
      j["phi_star"] = phi_star;
      j["psi_star"] = psi_star;
      j["tol"] = tol;
      j["item1_ok"] = r.item1_ok;
      j["item2_ok"] = r.item2_ok;
      j["item1_violation"] = round_significant(r.item1_violation);
      j["item2_violation"] = round_significant(r.item2_violation);
      j["worst_violation"] = round_significant(r.worst_violation);
      j["semi_nash"] = r.item1_ok && r.item2_ok;
      emit(nash_c.out, [&](std::ostream& os) { os << j.dump(2) << '\n'; });
    }
  } catch (const std::exception& e) {
    std::cerr << "oodtv: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
