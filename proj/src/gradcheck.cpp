#include "oodtv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace oodtv {

std::vector<double> central_differences(const std::function<double(std::span<const double>)>& f,
                                        std::span<const double> point, double step) {
  if (!(step > 0.0)) throw Error("central_differences: step must be positive");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double hi = f(x);
    x[i] = saved - step;
    const double lo = f(x);
    x[i] = saved;
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw NonFiniteError("central_differences: non-finite value at coordinate " +
                               std::to_string(i),
                           i);
    }
    out[i] = (hi - lo) / (2.0 * step);
  }
  return out;
}

double grad_check(const DifferentiableFn& f, std::span<const double> point, double step) {
  const ValueAndGradient at = f(point);
  if (!std::isfinite(at.value)) {
    throw NonFiniteError("grad_check: non-finite value at the base point", 0);
  }
  if (at.gradient.size() != point.size()) {
    throw Error("grad_check: gradient has " + std::to_string(at.gradient.size()) +
                " entries for a point of dimension " + std::to_string(point.size()));
  }
  const auto fd = central_differences([&](std::span<const double> x) { return f(x).value; },
                                      point, step);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double err = std::abs(at.gradient[i] - fd[i]) / std::max(1.0, std::abs(fd[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace oodtv
