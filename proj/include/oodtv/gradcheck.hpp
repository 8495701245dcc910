#pragma once

#include <functional>
#include <span>
#include <vector>

#include "oodtv/tensor.hpp"

namespace oodtv {

struct ValueAndGradient {
  double value = 0.0;
  std::vector<double> gradient;
};

/// A scalar function of a flat parameter vector, reporting its analytic gradient.
using DifferentiableFn = std::function<ValueAndGradient(std::span<const double>)>;

/// f returned a non-finite value while probing one coordinate.
class NonFiniteError : public Error {
 public:
  NonFiniteError(const std::string& what, std::size_t coordinate)
      : Error(what), coordinate_(coordinate) {}
  std::size_t coordinate() const noexcept { return coordinate_; }

 private:
  std::size_t coordinate_;
};

/// Central-difference check of f's analytic gradient at `point`.
///
/// Returns max_i |analytic_i - fd_i| / max(1, |fd_i|).
double grad_check(const DifferentiableFn& f, std::span<const double> point, double step);

/// Central differences of a plain scalar function.
std::vector<double> central_differences(const std::function<double(std::span<const double>)>& f,
                                        std::span<const double> point, double step);

}  // namespace oodtv
