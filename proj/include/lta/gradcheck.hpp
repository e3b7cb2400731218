#pragma once

// Finite-difference verification of analytic gradients. Runs in double; the
// spec tolerances assume central differences at delta = 1e-5.

#include <cmath>
#include <string>

#include "lta/types.hpp"

namespace lta {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Index worst_entry = -1;
  Index checked_entries = 0;
};

// loss_and_grad(): zero grads are the caller's responsibility is NOT assumed —
// this harness zeroes them itself via the visitor, runs the analytic pass,
// then perturbs every trainable entry in turn and calls loss_only().
//
// visit_params(fn) must call fn(name, Param<double>&) for every parameter.
template <typename LossGradFn, typename LossFn, typename VisitFn>
GradCheckReport grad_check(LossGradFn&& loss_and_grad, LossFn&& loss_only, VisitFn&& visit_params,
                           double delta = 1e-5) {
  visit_params([](const std::string&, Param<double>& p) { p.zero_grad(); });

  const double analytic_loss = loss_and_grad();
  if (!std::isfinite(analytic_loss))
    throw NumericError("grad_check: non-finite loss " + std::to_string(analytic_loss));

  GradCheckReport report;
  visit_params([&](const std::string& name, Param<double>& p) {
    if (!p.trainable) return;
    for (Index i = 0; i < p.size(); ++i) {
      const double saved = p.value(i);
      p.value(i) = saved + delta;
      const double lp = loss_only();
      p.value(i) = saved - delta;
      const double lm = loss_only();
      p.value(i) = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm))
        throw NumericError("grad_check: non-finite perturbed loss at " + name);
      const double central = (lp - lm) / (2.0 * delta);
      const double rel = std::abs(p.grad(i) - central) / std::max(1.0, std::abs(central));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_entry = i;
      }
      ++report.checked_entries;
    }
  });
  return report;
}

}  // namespace lta
