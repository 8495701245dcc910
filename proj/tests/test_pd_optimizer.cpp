#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "oodtv/pd_optimizer.hpp"

using namespace oodtv;

namespace {

// g(Ψ, Φ) = Φ² - (Ψ - Φ)², equilibrium at the origin.
Evaluation toy(const ModelParams& p) {
  const double phi = p.phi[0], psi = p.psi[0];
  Evaluation e;
  e.value.fidelity = phi * phi;
  e.value.penalty_base = -(psi - phi) * (psi - phi);
  e.value.lambda = 1.0;
  e.value.total = e.value.fidelity + e.value.penalty_base;
  e.grads.d_phi = {2.0 * psi};
  e.grads.d_psi = {-2.0 * (psi - phi)};
  return e;
}

double norm(const std::vector<double>& v) {
  return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

// Measuring ‖Φ' - Φ‖ through a float difference loses up to an ulp of |Φ|
// per coordinate, which matters once 1/k^p falls far below |Φ|.
double rounding_slack(const std::vector<double>& phi, double drift = 0.0) {
  double m = 0.0;
  for (double v : phi) m = std::max(m, std::abs(v));
  return 4.0 * std::numeric_limits<double>::epsilon() * (m + drift + 1.0) *
         std::sqrt(static_cast<double>(phi.size()));
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

Suite small_suite(std::uint64_t seed, std::size_t n = 200) {
  SuiteConfig cfg;
  cfg.seed = seed;
  cfg.n_train = n;
  cfg.n_test_per_env = 10;
  return make_suite(cfg);
}

TrainConfig short_config(ObjectiveKind kind, long a, long t) {
  TrainConfig cfg;
  cfg.objective = kind;
  cfg.anneal_epochs = a;
  cfg.total_epochs = t;
  return cfg;
}

}  // namespace

TEST_CASE("step_size") {
  CHECK(step_size(2, 2.0, 0.5) == 0.5);
  CHECK(step_size(7, 2.0, 0.0) == 0.0);
  CHECK(step_size(1, 3.0, 4.0) == 0.25);
  CHECK_THROWS_AS(step_size(1, 1.0, 1.0), Error);
  CHECK_THROWS_AS(step_size(1, 0.5, 1.0), Error);
  CHECK_THROWS_AS(step_size(0, 2.0, 1.0), Error);
  CHECK_THROWS_AS(step_size(1, 2.0, -1.0), Error);
}

TEST_CASE("iterations_for_tolerance") {
  CHECK(iterations_for_tolerance(2.0, 0.01) == 102);
  // The bound at eps = 1 is exactly 2; the smallest integer strictly above is 3.
  CHECK(iterations_for_tolerance(2.0, 1.0) == 3);
  CHECK(iterations_for_tolerance(1.5, 0.01) == 40002);
  for (double p : {1.5, 2.0, 3.0}) {
    for (double eps : {0.3, 0.01, 1e-3}) {
      const long n = iterations_for_tolerance(p, eps);
      const double bound = std::pow((p - 1) * eps, -1 / (p - 1)) + 1;
      CHECK(static_cast<double>(n) > bound - 1e-9);
      CHECK(static_cast<double>(n - 1) <= bound + 1e-9);
      // Tail bound at N = n is within eps.
      CHECK(1.0 / ((p - 1) * std::pow(static_cast<double>(n - 1), p - 1)) <= eps * (1 + 1e-12));
    }
  }
  CHECK_THROWS_AS(iterations_for_tolerance(1.0, 0.1), Error);
  CHECK_THROWS_AS(iterations_for_tolerance(2.0, 0.0), Error);
}

TEST_CASE("Adam first step has the magnitude of the learning rate") {
  Adam adam;
  const auto d = adam.step({3.0, -0.2, 0.0});
  CHECK(d[0] == doctest::Approx(1e-3).epsilon(1e-6));
  CHECK(d[1] == doctest::Approx(-1e-3).epsilon(1e-6));
  CHECK(d[2] == 0.0);
}

TEST_CASE("zero gradients leave the state unchanged except k") {
  PDState s;
  s.phi = {0.3, -1.0};
  s.psi = {2.0};
  s.rho = std::vector<double>{0.5};
  s.k = 4;
  const GradEvaluator zero = [](const ModelParams&) {
    Evaluation e;
    e.grads.d_phi = {0.0, 0.0};
    e.grads.d_psi = {0.0};
    e.grads.d_rho = std::vector<double>{0.0};
    return e;
  };
  const PDState next = primal_dual_step(s, zero);
  CHECK(next.phi == s.phi);
  CHECK(next.psi == s.psi);
  CHECK(*next.rho == *s.rho);
  CHECK(next.k == 5);
  REQUIRE(next.trace.size() == 1);
  CHECK(next.trace[0].epoch == 4);
  CHECK(next.trace[0].dphi_norm == 0.0);
}

TEST_CASE("convergent primal step has norm 1/k^p") {
  for (double p : {1.5, 2.0, 3.0}) {
    PDState s;
    s.phi = {0.4, -0.1, 2.0};
    s.p = p;
    const GradEvaluator eval = [](const ModelParams& m) {
      Evaluation e;
      e.grads.d_phi = {m.phi[0] * 3, 1.0, -m.phi[2]};
      return e;
    };
    for (long k = 1; k <= 20; ++k) {
      const auto before = s.phi;
      s = primal_dual_step(s, eval);
      const double expected = 1.0 / std::pow(static_cast<double>(k), p);
      CHECK(std::abs(distance(s.phi, before) - expected) <= rounding_slack(before));
      CHECK(s.trace.back().dphi_norm == distance(s.phi, before));
    }
  }
}

TEST_CASE("dual gradient is taken at the updated primal point") {
  SUBCASE("toy game") {
    PDState s;
    s.phi = {0.5};
    s.psi = {0.5};
    const PDState next = primal_dual_step(s, toy);
    // Φ moves to -0.5; at (Ψ, Φ) = (0.5, -0.5) the ascent direction is negative.
    // At the stale point (0.5, 0.5) it would be zero and Ψ would stay put.
    CHECK(next.phi[0] == -0.5);
    CHECK(next.psi[0] == -0.5);
  }
  SUBCASE("lambda-net that reads Phi") {
    const Suite suite = small_suite(3, 60);
    const ModelBundle b = make_simulation_bundle(true, false, 5);
    const auto obj = LagrangianObjective::irm(b.phi.spec(), b.lambda->spec(), suite.train, Flavor::l1);
    PDState s;
    s.phi = b.phi.params();
    s.psi = b.lambda->params();
    s.psi[16] = 1.0;  // active hidden unit, so Ψ's gradient depends on Φ
    const PDState next = primal_dual_step(s, [&](const ModelParams& m) { return obj.evaluate(m); });

    auto ascend_from = [&](const std::vector<double>& phi_at) {
      const Evaluation e = obj.evaluate({phi_at, s.psi, {}});
      const double eta = step_size(1, 2.0, norm(e.grads.d_psi));
      std::vector<double> out = s.psi;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += eta * e.grads.d_psi[i];
      return out;
    };
    const auto correct = ascend_from(next.phi);
    const auto swapped = ascend_from(s.phi);
    CHECK(distance(next.psi, correct) <= 1e-15);
    CHECK(distance(correct, swapped) > 1e-6);
  }
}

TEST_CASE("toy game reaches the equilibrium within the predicted iteration count") {
  const long n = iterations_for_tolerance(2.0, 1e-2);
  for (double c : {0.5, -0.6, 0.9, 1.2, 1.5}) {
    CAPTURE(c);
    PDState s;
    s.phi = {c};
    s.psi = {c};
    for (long i = 0; i < n; ++i) s = primal_dual_step(s, toy);
    CHECK(std::abs(s.phi[0]) < 1e-2);
    CHECK(std::abs(s.psi[0]) < 1e-2);
    CHECK(s.k == n + 1);
  }
}

TEST_CASE("non-finite gradients raise with the epoch") {
  PDState s;
  s.phi = {1.0};
  s.k = 9;
  const GradEvaluator bad = [](const ModelParams&) {
    Evaluation e;
    e.grads.d_phi = {std::nan("")};
    return e;
  };
  try {
    primal_dual_step(s, bad);
    FAIL("no error");
  } catch (const NonFiniteGradient& e) {
    CHECK(std::string(e.what()).find("9") != std::string::npos);
  }
}

TEST_CASE("convergent training satisfies the step and tail bounds") {
  const Suite suite = small_suite(1, 100);
  for (double p : {1.5, 2.0, 3.0}) {
    CAPTURE(p);
    TrainConfig cfg = short_config(ObjectiveKind::g, 0, 500);
    cfg.primal_rule = StepRule::convergent;
    cfg.p = p;
    const TrainResult r = train(make_simulation_bundle(true, false, 2), suite.train, cfg);
    REQUIRE(r.trace.size() == 500);
    // Total movement is at most zeta(p) < 3, so that bounds every iterate.
    const double slack = rounding_slack(r.model.phi.params(), 3.0);
    std::vector<double> steps;
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
      const double bound = 1.0 / std::pow(static_cast<double>(i + 1), p);
      CHECK(r.trace[i].dphi_norm <= bound + slack);
      CHECK(r.trace[i].dphi_norm >= bound - slack);
      steps.push_back(r.trace[i].dphi_norm);
    }
    for (std::size_t n : {2u, 10u, 100u}) {
      const double tail = std::accumulate(steps.begin() + static_cast<long>(n - 1), steps.end(), 0.0);
      CHECK(tail <= 1.0 / ((p - 1) * std::pow(static_cast<double>(n - 1), p - 1)) +
                       slack * static_cast<double>(steps.size()));
    }
  }
}

TEST_CASE("annealing freezes the dual networks") {
  const Suite suite = small_suite(2);
  for (ObjectiveKind kind : {ObjectiveKind::g, ObjectiveKind::h}) {
    const ModelBundle init = make_simulation_bundle(true, kind == ObjectiveKind::h, 11);
    SUBCASE("A = T leaves lambda at its initialization") {
      const TrainResult r = train(init, suite.train, short_config(kind, 30, 30));
      CHECK(r.model.lambda->params() == init.lambda->params());
      if (init.rho) CHECK(r.model.rho->params() == init.rho->params());
      CHECK(r.model.phi.params() != init.phi.params());
      for (const auto& rec : r.trace) {
        CHECK(rec.lambda == 1.0);
        CHECK(rec.dpsi_norm == 0.0);
      }
    }
    SUBCASE("the adversarial phase moves lambda") {
      const TrainResult r = train(init, suite.train, short_config(kind, 10, 30));
      CHECK(r.model.lambda->params() != init.lambda->params());
      CHECK(r.trace[10].dpsi_norm > 0.0);
    }
  }
  SUBCASE("rho can train during annealing when unfrozen") {
    const ModelBundle init = make_simulation_bundle(true, true, 11);
    TrainConfig cfg = short_config(ObjectiveKind::h, 20, 20);
    cfg.freeze_rho_during_annealing = false;
    const TrainResult r = train(init, suite.train, cfg);
    CHECK(r.model.lambda->params() == init.lambda->params());
    CHECK(r.model.rho->params() != init.rho->params());
  }
}

TEST_CASE("training is deterministic") {
  const Suite suite = small_suite(4);
  for (ObjectiveKind kind : {ObjectiveKind::g, ObjectiveKind::h}) {
    const TrainConfig cfg = short_config(kind, 15, 40);
    const ModelBundle init = make_simulation_bundle(true, kind == ObjectiveKind::h, 3);
    const TrainResult a = train(init, suite.train, cfg);
    const TrainResult b = train(init, suite.train, cfg);
    REQUIRE(a.trace.size() == 40);
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
      CHECK(a.trace[i].total == b.trace[i].total);
      CHECK(a.trace[i].dpsi_norm == b.trace[i].dpsi_norm);
      CHECK(a.trace[i].epoch == static_cast<long>(i + 1));
    }
    CHECK(a.model.phi.params() == b.model.phi.params());
  }
}

TEST_CASE("trace records recompose") {
  const Suite suite = small_suite(5);
  const TrainResult r =
      train(make_simulation_bundle(true, false, 1), suite.train, short_config(ObjectiveKind::g, 5, 20));
  for (const auto& rec : r.trace) CHECK(std::abs(rec.fidelity + rec.penalty - rec.total) <= 1e-12);
}

TEST_CASE("trace JSONL round trip at 6 significant digits") {
  TrainTrace t{{1, 0.123456789, 0.1, 0.023456789, 1.0, 1e-3, 0.0},
               {2, 7.5, 7.0, 0.5, 0.987654321, 0.25, 3.14159265358979}};
  std::stringstream ss;
  write_trace_jsonl(ss, t);
  const std::string text = ss.str();
  CHECK(text.find("\"epoch\":1") != std::string::npos);
  CHECK(text.find("\"dpsi_norm\"") != std::string::npos);
  const TrainTrace back = read_trace_jsonl(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[0].total == 0.123457);
  CHECK(back[1].lambda == 0.987654);
  CHECK(back[1].dpsi_norm == 3.14159);
  std::stringstream again;
  write_trace_jsonl(again, back);
  CHECK(again.str() == text);
}

TEST_CASE("divergence guard") {
  const Suite suite = small_suite(6, 50);
  TrainConfig cfg = short_config(ObjectiveKind::g, 3, 10);
  cfg.divergence_limit = 1e-3;
  const ModelBundle init = make_simulation_bundle(true, false, 2);
  try {
    train(init, suite.train, cfg);
    FAIL("no divergence raised");
  } catch (const TrainingDiverged& e) {
    CHECK(e.trace().empty());
    CHECK(e.last_good().phi.params() == init.phi.params());
  }
  TrainConfig bad = short_config(ObjectiveKind::g, 10, 5);
  CHECK_THROWS_AS(train(init, suite.train, bad), Error);
  CHECK_THROWS_AS(train(make_simulation_bundle(true, false, 2), suite.train,
                        short_config(ObjectiveKind::h, 1, 2)),
                  Error);
}

TEST_CASE("default-length run stabilizes in the adversarial phase") {
  const Suite suite = make_suite(SuiteConfig{});
  const TrainResult r = train(make_simulation_bundle(true, false, 0), suite.train, TrainConfig{});
  REQUIRE(r.trace.size() == 2400);
  auto avg = [&](std::size_t from, std::size_t to, bool psi) {
    double s = 0.0;
    for (std::size_t i = from; i < to; ++i) s += psi ? r.trace[i].dpsi_norm : r.trace[i].dphi_norm;
    return s / static_cast<double>(to - from);
  };
  CHECK(avg(2350, 2400, false) < avg(2000, 2050, false));
  CHECK(avg(2350, 2400, true) < avg(2000, 2050, true));
}
