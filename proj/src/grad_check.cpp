#include "gssm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gssm::ad {

namespace {

void compare(const Matrix& analytic, const Matrix& numeric, double fx, GradCheckResult& r) {
  if (!numeric.allFinite() || !analytic.allFinite()) {
    r.finite = false;
    r.max_rel_error = std::numeric_limits<double>::infinity();
    return;
  }
  // Coordinates far below the gradient's own scale sit under the central
  // difference roundoff (about eps*|f|/step), so the denominator is floored
  // at 1e-3 of the largest entry and at a multiple of |f|.
  const double floor = std::max(1e-3 * numeric.cwiseAbs().maxCoeff(), 1e-4 * std::max(1.0, std::abs(fx)));
  for (Eigen::Index i = 0; i < numeric.size(); ++i) {
    const double fd = numeric.data()[i];
    const double err = std::abs(analytic.data()[i] - fd) / std::max(std::abs(fd), floor);
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = static_cast<std::size_t>(i);
    }
  }
}

}  // namespace

double evaluate(const ScalarFn& f, const Matrix& x) {
  Tape t;
  return f(t, t.constant(x)).item();
}

GradCheckResult grad_check(const ScalarFn& f, const Matrix& point, double step) {
  GradCheckResult r;
  Tape t;
  Var x = t.leaf(point);
  Var y = f(t, x);
  if (t.kink_count() > 0) r.checkable = false;
  if (!std::isfinite(y.item()) || t.nonfinite_count() > 0) {
    r.finite = false;
    r.max_rel_error = std::numeric_limits<double>::infinity();
    return r;
  }
  t.backward(y);
  const Matrix analytic = t.adjoint(x);

  Matrix probe = point;
  Matrix numeric(point.rows(), point.cols());
  for (Eigen::Index i = 0; i < probe.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + step;
    const double fp = evaluate(f, probe);
    probe.data()[i] = orig - step;
    const double fm = evaluate(f, probe);
    probe.data()[i] = orig;
    numeric.data()[i] = (fp - fm) / (2.0 * step);
  }
  compare(analytic, numeric, y.item(), r);
  return r;
}

GradCheckResult grad_check_param(const LossFn& loss, Param& p, double step, std::size_t max_coords) {
  GradCheckResult r;
  const Matrix saved_grad = p.grad;
  p.zero_grad();
  double fx = 0.0;
  {
    Tape t;
    Var y = loss(t);
    fx = y.item();
    if (t.kink_count() > 0) r.checkable = false;
    if (!std::isfinite(fx) || t.nonfinite_count() > 0) {
      r.finite = false;
      r.max_rel_error = std::numeric_limits<double>::infinity();
      p.grad = saved_grad;
      return r;
    }
    t.backward(y);
    t.accumulate_param_grads();
  }
  const auto n = static_cast<std::size_t>(p.value.size());
  const std::size_t count = max_coords == 0 ? n : std::min(n, max_coords);
  Matrix analytic(1, static_cast<Eigen::Index>(count)), numeric(1, static_cast<Eigen::Index>(count));
  auto eval = [&] {
    Tape t;
    return loss(t).item();
  };
  for (std::size_t c = 0; c < count; ++c) {
    // evenly strided coordinates when subsampling
    const auto i = static_cast<Eigen::Index>(c * n / count);
    const double orig = p.value.data()[i];
    p.value.data()[i] = orig + step;
    const double fp = eval();
    p.value.data()[i] = orig - step;
    const double fm = eval();
    p.value.data()[i] = orig;
    numeric.data()[c] = (fp - fm) / (2.0 * step);
    analytic.data()[c] = p.grad.data()[i];
  }
  p.grad = saved_grad;
  compare(analytic, numeric, fx, r);
  return r;
}

}  // namespace gssm::ad
