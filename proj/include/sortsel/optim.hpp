#pragma once

// Small unconstrained optimizer used by the likelihood fits.

#include <functional>
#include <string>

#include "sortsel/mvn.hpp"

namespace sortsel {

/// Objective returning f(x) and, when grad != nullptr, writing its gradient.
/// Returning a non-finite value marks x as infeasible.
using Objective = std::function<double(const Vec& x, Vec* grad)>;

struct MinimizeOptions {
  double grad_tol = 1e-6;  // sup-norm of the gradient
  double f_tol = 0.0;      // relative change in f between iterations; 0 disables
  int max_iter = 200;
};

struct MinimizeResult {
  Vec x;
  double value = 0.0;
  Vec grad;
  int iterations = 0;
  bool converged = false;
  std::string status;
};

/// BFGS with Armijo backtracking. `inv_hessian0` seeds the inverse Hessian
/// approximation (identity when empty).
MinimizeResult minimize_bfgs(const Objective& f, Vec x0, const MinimizeOptions& opts,
                             const Mat& inv_hessian0 = Mat());

/// Central differences of the analytic gradient, symmetrized.
Mat numerical_hessian(const Objective& f, const Vec& x, double step = 1e-5);

/// Root of a continuous f on [lo, hi] with f(lo), f(hi) of opposite sign
/// (Brent's method). Throws std::domain_error if the bracket is invalid.
double brent_root(const std::function<double(double)>& f, double lo, double hi,
                  double x_tol = 1e-12, int max_iter = 200);

/// Inverse of a symmetric matrix that is expected to be positive definite;
/// falls back to a pseudo-inverse when it is not.
Mat inverse_spd(const Mat& m);

}  // namespace sortsel
