#pragma once

#include <functional>
#include <random>
#include <span>
#include <vector>

#include "oodtv/autodiff.hpp"
#include "oodtv/gradcheck.hpp"

namespace oodtv::test {

inline std::vector<double> uniform_vector(std::mt19937_64& rng, std::size_t n, double lo = -1.0,
                                          double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

/// Scalar built on a fresh tape from leaves carrying `point`, reduced with
/// fixed random weights so every output element is probed.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Wraps `build` as a DifferentiableFn over the concatenation of leaves with
/// the given shapes.
inline DifferentiableFn as_fn(const std::vector<Shape>& shapes, Builder build) {
  return [shapes, build](std::span<const double> p) {
    Tape tape;
    std::vector<Var> leaves;
    std::size_t off = 0;
    for (const auto& s : shapes) {
      const std::size_t n = shape_numel(s);
      leaves.push_back(tape.leaf(Tensor(s, std::vector<double>(p.begin() + off, p.begin() + off + n))));
      off += n;
    }
    Var out = build(tape, leaves);
    ValueAndGradient r;
    r.value = out.item();
    const Gradients g = tape.backward(out);
    for (const auto& l : leaves) {
      const Tensor& t = g[l];
      r.gradient.insert(r.gradient.end(), t.data().begin(), t.data().end());
    }
    return r;
  };
}

inline std::size_t total_size(const std::vector<Shape>& shapes) {
  std::size_t n = 0;
  for (const auto& s : shapes) n += shape_numel(s);
  return n;
}

}  // namespace oodtv::test
