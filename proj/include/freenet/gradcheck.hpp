#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "freenet/autodiff.hpp"

namespace freenet {

// Central finite differences against analytic gradients.
//
// `build` must construct the forward pass on the given graph from the given
// leaves and return a scalar loss.  The leaves are perturbed in place, one
// coordinate at a time, so `build` has to read the current leaf values on
// every call.  Returns the maximum relative error
//     |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
// over every coordinate of every leaf.
//
// Coordinates whose error exceeds 1e-7 are retried with the step shrunk 8x
// twice, keeping the smallest error.  A coordinate that lands within eps of a
// relu kink produces a bogus one-sided difference at the original step, but
// converges once the step no longer straddles the kink; a genuinely wrong
// analytic gradient stays wrong at every step size.
template <class S>
double finite_difference_check(
    const std::function<Tensor<S>(Graph<S>&, std::vector<Tensor<S>>&)>& build,
    std::vector<Tensor<S>> leaves, double eps = 1e-4) {
  if (leaves.empty()) throw UsageError("finite_difference_check: no leaves");
  for (auto& l : leaves) {
    if (!l.requires_grad()) throw UsageError("finite_difference_check: leaves must require grad");
    l.zero_grad();
  }

  // Analytic pass.
  {
    Graph<S> g;
    Tensor<S> loss = build(g, leaves);
    if (!loss.all_finite()) throw NumericError("finite_difference_check: non-finite loss");
    g.backward(loss);
  }

  auto eval = [&]() -> double {
    Graph<S> g(/*record=*/false);
    Tensor<S> loss = build(g, leaves);
    if (!loss.all_finite()) throw NumericError("finite_difference_check: non-finite loss during probing");
    return static_cast<double>(loss.item());
  };

  // The centered difference carries rounding noise of roughly
  // machine_eps * |loss| / step, so derivatives inside that band are
  // unmeasurable: a coordinate whose analytic AND numeric values both fall
  // below it (e.g. a parameter the function provably cancels) is
  // indistinguishable from a true zero and counts as correct.  Anything
  // above the band is still compared at full strength.
  const double noise_band =
      1e3 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::fabs(eval())) / eps;

  double worst = 0.0;
  for (auto& leaf : leaves) {
    const std::vector<S> analytic =
        leaf.has_grad() ? leaf.grad() : std::vector<S>(leaf.values().size(), S{0});
    auto& vals = leaf.values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const S saved = vals[i];
      const double a = static_cast<double>(analytic[i]);
      auto error_at = [&](double step) {
        vals[i] = saved + S(step);
        const double up = eval();
        vals[i] = saved - S(step);
        const double down = eval();
        vals[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        if (std::fabs(a) < noise_band && std::fabs(numeric) < noise_band) return 0.0;
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        return std::fabs(a - numeric) / denom;
      };
      double err = error_at(eps);
      for (double step = eps / 8.0; err > 1e-7 && step > eps / 1000.0; step /= 8.0)
        err = std::min(err, error_at(step));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace freenet
