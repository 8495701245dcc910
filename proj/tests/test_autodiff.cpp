#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>
#include <string>

#include "oodtv/autodiff.hpp"
#include "oodtv/gradcheck.hpp"
#include "support.hpp"

using namespace oodtv;
using oodtv::test::as_fn;
using oodtv::test::Builder;

namespace {

// Reduce a tensor-valued op to a scalar with fixed pseudo-random weights.
Var probe(Tape& tape, const Var& v) {
  std::mt19937_64 rng(99);
  const Tensor& t = v.value();
  Tensor w(t.shape(), oodtv::test::uniform_vector(rng, t.size(), 0.5, 1.5));
  return weighted_sum(v, tape.constant(std::move(w)));
}

struct OpCase {
  std::vector<Shape> shapes;
  Builder build;
  double lo = -2.0;
  double hi = 2.0;
  // Reject points near kinks or poles.
  std::function<bool(const std::vector<double>&)> admissible = [](const std::vector<double>&) {
    return true;
  };
};

bool away_from_zero(const std::vector<double>& p) {
  for (double x : p) {
    if (std::abs(x) < 1e-3) return false;
  }
  return true;
}

std::map<std::string, OpCase> op_cases() {
  std::map<std::string, OpCase> c;
  const Shape m23{2, 3}, m32{3, 2}, row3{1, 3}, one{1, 1}, col4{4, 1};
  c["matmul"] = {{m23, m32}, [](Tape& t, const std::vector<Var>& v) { return probe(t, matmul(v[0], v[1])); }};
  c["add"] = {{m23, m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] + v[1]); }};
  c["add_row"] = {{m23, row3}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] + v[1]); }};
  c["add_scalar"] = {{m23, one}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[1] + v[0]); }};
  c["sub"] = {{m23, m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] - v[1]); }};
  c["sub_scalar"] = {{m23, one}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] - v[1]); }};
  c["mul"] = {{m23, m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] * v[1]); }};
  c["mul_scalar"] = {{m23, one}, [](Tape& t, const std::vector<Var>& v) { return probe(t, v[1] * v[0]); }};
  c["div"] = {{m23, m23},
              [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] / v[1]); },
              0.5, 2.0};
  c["div_scalar"] = {{m23, one},
                     [](Tape& t, const std::vector<Var>& v) { return probe(t, v[0] / v[1]); },
                     0.5, 2.0};
  c["scale"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, scale(v[0], -1.7)); }};
  c["shift"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, shift(v[0], 0.3)); }};
  c["relu"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, relu(v[0])); }};
  c["relu"].admissible = away_from_zero;
  c["sigmoid"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, sigmoid(v[0])); }};
  c["softplus"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, softplus(v[0])); }};
  c["softmax"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, softmax(v[0])); }};
  c["abs"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, abs(v[0])); }};
  c["abs"].admissible = away_from_zero;
  c["square"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, square(v[0])); }};
  c["sum"] = {{m23}, [](Tape&, const std::vector<Var>& v) { return sum(v[0]); }};
  c["mean"] = {{m23}, [](Tape&, const std::vector<Var>& v) { return mean(v[0]); }};
  c["weighted_sum"] = {{m23, m23}, [](Tape&, const std::vector<Var>& v) { return weighted_sum(v[0], v[1]); }};
  c["bce_logits"] = {{col4}, [](Tape& t, const std::vector<Var>& v) {
                       return probe(t, bce_with_logits(v[0], Tensor::column({0, 1, 1, 0})));
                     }};
  c["squared_error"] = {{col4}, [](Tape& t, const std::vector<Var>& v) {
                          return probe(t, squared_error(v[0], Tensor::column({0.5, -1, 2, 0})));
                        }};
  c["column"] = {{m23}, [](Tape& t, const std::vector<Var>& v) { return probe(t, column(v[0], 1)); }};
  c["concat_flat"] = {{m23, row3},
                      [](Tape& t, const std::vector<Var>& v) { return probe(t, concat_flat({v[0], v[1]})); }};
  c["safe_div"] = {{one, one},
                   [](Tape&, const std::vector<Var>& v) { return safe_div(v[0], v[1]); },
                   0.5, 2.0};
  return c;
}

}  // namespace

TEST_CASE("activation values at reference points") {
  Tape tape;
  CHECK(sigmoid(tape.scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(softplus(tape.scalar(0.0)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(relu(tape.scalar(-3.0)).item() == 0.0);
  CHECK(softplus(800.0) == doctest::Approx(800.0));
  CHECK(softplus(-800.0) >= 0.0);
  CHECK(std::isfinite(sigmoid(-800.0)));
}

TEST_CASE("d/dx (x*x) at 3 is 6") {
  Tape tape;
  Var x = tape.leaf(Tensor::scalar(3.0));
  const Gradients g = tape.backward(x * x);
  CHECK(g[x].item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("gradient of a constant is a zero tensor") {
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(2, 2, {1, 2, 3, 4}));
  Var c = tape.scalar(5.0);
  const Gradients g = tape.backward(c);
  CHECK(g[x].shape() == Shape{2, 2});
  for (double v : g[x].data()) CHECK(v == 0.0);
}

TEST_CASE("backward preconditions") {
  SUBCASE("non-scalar output") {
    Tape tape;
    Var x = tape.leaf(Tensor::matrix(1, 2, {1, 2}));
    CHECK_THROWS_AS(tape.backward(x), Error);
  }
  SUBCASE("second backward on one tape") {
    Tape tape;
    Var x = tape.leaf(Tensor::scalar(1.0));
    Var y = square(x);
    tape.backward(y);
    CHECK_THROWS_AS(tape.backward(y), Error);
    CHECK_THROWS_AS(square(x), Error);
  }
  SUBCASE("gradient of a non-trainable leaf") {
    Tape tape;
    Var c = tape.constant(Tensor::scalar(2.0));
    Var x = tape.leaf(Tensor::scalar(1.0));
    const Gradients g = tape.backward(c * x);
    CHECK_THROWS_AS(g[c], Error);
  }
  SUBCASE("operands on different tapes") {
    Tape a, b;
    CHECK_THROWS_AS(add(a.scalar(1.0), b.scalar(1.0)), Error);
  }
}

TEST_CASE("shape errors name the op and both shapes") {
  Tape tape;
  Var a = tape.leaf(Tensor(Shape{2, 3}));
  Var b = tape.leaf(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL("matmul accepted mismatched shapes");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, tape.leaf(Tensor(Shape{3, 2}))), ShapeError);
  CHECK_THROWS_AS(weighted_sum(a, tape.leaf(Tensor(Shape{3, 2}))), ShapeError);
  CHECK_THROWS_AS(column(a, 3), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("every op matches central differences at 100 random points") {
  std::mt19937_64 rng(2024);
  for (const auto& [name, op] : op_cases()) {
    CAPTURE(name);
    const std::size_t n = oodtv::test::total_size(op.shapes);
    const DifferentiableFn f = as_fn(op.shapes, op.build);
    int checked = 0;
    double worst = 0.0;
    while (checked < 100) {
      auto p = oodtv::test::uniform_vector(rng, n, op.lo, op.hi);
      if (!op.admissible(p)) continue;
      worst = std::max(worst, grad_check(f, p, 1e-6));
      ++checked;
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("abs uses subgradient 0 at 0") {
  CHECK(subgrad_abs(0.0) == 0.0);
  CHECK(subgrad_abs(-2.0) == -1.0);
  CHECK(subgrad_abs(7.0) == 1.0);
  Tape tape;
  Var x = tape.leaf(Tensor::matrix(1, 3, {0.0, -2.0, 7.0}));
  const Gradients g = tape.backward(sum(abs(x)));
  CHECK(g[x][0] == 0.0);
  CHECK(g[x][1] == -1.0);
  CHECK(g[x][2] == 1.0);
}

TEST_CASE("safe_div is zero with zero gradient when the denominator vanishes") {
  Tape tape;
  Var a = tape.leaf(Tensor::scalar(3.0));
  Var b = tape.leaf(Tensor::scalar(0.0));
  Var q = safe_div(a, b);
  CHECK(q.item() == 0.0);
  const Gradients g = tape.backward(q);
  CHECK(g[a].item() == 0.0);
  CHECK(g[b].item() == 0.0);
}

TEST_CASE("backward is linear in the output") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto xv = oodtv::test::uniform_vector(rng, 6);
    const auto wv = oodtv::test::uniform_vector(rng, 3);
    const double a = std::uniform_real_distribution<double>(-3, 3)(rng);
    const double b = std::uniform_real_distribution<double>(-3, 3)(rng);
    auto grads = [&](int which) {
      Tape tape;
      Var x = tape.leaf(Tensor(Shape{2, 3}, xv));
      Var w = tape.leaf(Tensor(Shape{3, 1}, wv));
      Var f = mean(sigmoid(matmul(x, w)));
      Var g = sum(square(x));
      Var out = which == 0 ? f : which == 1 ? g : scale(f, a) + scale(g, b);
      const Gradients gr = tape.backward(out);
      std::vector<double> v(gr[x].data().begin(), gr[x].data().end());
      v.insert(v.end(), gr[w].data().begin(), gr[w].data().end());
      return v;
    };
    const auto gf = grads(0), gg = grads(1), gc = grads(2);
    for (std::size_t i = 0; i < gc.size(); ++i) {
      CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax rows are non-negative and sum to 1") {
  std::mt19937_64 rng(11);
  Tape tape;
  Var x = tape.constant(Tensor(Shape{50, 4}, oodtv::test::uniform_vector(rng, 200, -30, 30)));
  const Tensor s = softmax(x).value();
  for (std::size_t r = 0; r < 50; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      CHECK(s.at(r, c) >= 0.0);
      total += s.at(r, c);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("two-layer perceptron with BCE matches finite differences") {
  std::mt19937_64 rng(3);
  const auto xs = oodtv::test::uniform_vector(rng, 8 * 4);
  const Tensor y = Tensor::column({0, 1, 1, 0, 1, 0, 0, 1});
  const std::vector<Shape> shapes{{4, 5}, {1, 5}, {5, 1}, {1, 1}};
  const auto f = as_fn(shapes, [&](Tape& t, const std::vector<Var>& v) {
    Var x = t.constant(Tensor(Shape{8, 4}, xs));
    Var h = relu(matmul(x, v[0]) + v[1]);
    return mean(bce_with_logits(matmul(h, v[2]) + v[3], y));
  });
  const auto p = oodtv::test::uniform_vector(rng, oodtv::test::total_size(shapes));
  CHECK(grad_check(f, p, 1e-6) < 1e-5);
}

TEST_CASE("grad_check reference cases") {
  const DifferentiableFn sq = [](std::span<const double> p) {
    return ValueAndGradient{p[0] * p[0], {2 * p[0]}};
  };
  const std::vector<double> three{3.0};
  CHECK(grad_check(sq, three, 1e-6) < 1e-8);

  const DifferentiableFn constant = [](std::span<const double> p) {
    return ValueAndGradient{4.0, std::vector<double>(p.size(), 0.0)};
  };
  const std::vector<double> pt{1.0, -2.0};
  CHECK(grad_check(constant, pt, 1e-6) == 0.0);

  const DifferentiableFn blowup = [](std::span<const double> p) {
    const double v = p[1] > 0.0 ? std::nan("") : 0.0;
    return ValueAndGradient{v, {0.0, 0.0}};
  };
  const std::vector<double> at{0.0, -5e-7};
  try {
    grad_check(blowup, at, 1e-6);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(e.coordinate() == 1);
  }
  CHECK_THROWS_AS(grad_check(sq, three, 0.0), Error);
}

TEST_CASE("tensor accessors") {
  const Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.at(1, 2) == 6.0);
  CHECK(Tensor::scalar(2.5).item() == 2.5);
  CHECK_THROWS_AS(m.item(), Error);
  CHECK(shape_string(m.shape()) == "[2, 3]");
  Tensor bad = Tensor::column({1.0, std::nan("")});
  CHECK_FALSE(bad.all_finite());
}
