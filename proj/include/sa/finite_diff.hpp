#pragma once

#include <functional>
#include <stdexcept>

#include "sa/tape.hpp"
#include "sa/tensor.hpp"

namespace sa {

// Central-difference gradient verifier (float64 only; the tolerances are
// meaningless at float32). Returns
//   max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12).
inline double finite_diff_check(const std::function<double(const Tensor&)>& f,
                                const std::function<Tensor(const Tensor&)>& grad_f,
                                const Tensor& x, double eps) {
  if (eps < 1e-6 || eps > 1e-3) throw std::invalid_argument("finite_diff_check: eps out of range");
  Tensor analytic = grad_f(x);
  if (!analytic.same_shape(x)) throw std::invalid_argument("finite_diff_check: gradient shape");
  double max_rel = 0.0;
  Tensor xp = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    xp.data[i] = x.data[i] + eps;
    double fp = f(xp);
    xp.data[i] = x.data[i] - eps;
    double fm = f(xp);
    xp.data[i] = x.data[i];
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("finite_diff_check: non-finite value at perturbed point");
    double numeric = (fp - fm) / (2.0 * eps);
    double a = analytic.data[i];
    double rel = std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

// Convenience form for functions expressed as a tape program: build(tape, x_id)
// must return the id of a scalar output node.
inline double finite_diff_check_tape(const std::function<int(TapeD&, int)>& build, const Tensor& x,
                                     double eps) {
  auto value = [&](const Tensor& v) {
    TapeD tape;
    int xid = tape.leaf(v, true);
    int out = build(tape, xid);
    return tape.val(out).data[0];
  };
  auto gradient = [&](const Tensor& v) {
    TapeD tape;
    int xid = tape.leaf(v, true);
    int out = build(tape, xid);
    tape.backward(out);
    return tape.grad(xid);
  };
  return finite_diff_check(value, gradient, x, eps);
}

}  // namespace sa
