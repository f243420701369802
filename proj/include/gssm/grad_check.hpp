#pragma once

#include "gssm/autodiff.hpp"

#include <functional>

namespace gssm::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  /// False when the forward pass hit a kink (relu at 0, clamp at a bound, ...).
  bool checkable = true;
  /// False when the function or a derivative estimate was NaN/Inf.
  bool finite = true;

  [[nodiscard]] bool passed(double tol) const { return checkable && finite && max_rel_error <= tol; }
};

using ScalarFn = std::function<Var(Tape&, Var)>;

/// Compares reverse-mode gradients of a scalar function against central
/// differences: max_i |g_i - fd_i| / max(|fd_i|, 1e-3 max_j |fd_j|, 1e-4 max(1, |f|)).
GradCheckResult grad_check(const ScalarFn& f, const Matrix& point, double step = 1e-6);

using LossFn = std::function<Var(Tape&)>;

/// Same comparison for a Param read through Tape::param inside `loss`.
/// Checks at most `max_coords` evenly strided entries (0 = all). p.grad is
/// left as it was.
GradCheckResult grad_check_param(const LossFn& loss, Param& p, double step = 1e-6, std::size_t max_coords = 0);

/// Value of f at x on a throwaway tape.
double evaluate(const ScalarFn& f, const Matrix& x);

}  // namespace gssm::ad
