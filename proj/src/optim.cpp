#include "sortsel/optim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace sortsel {

MinimizeResult minimize_bfgs(const Objective& f, Vec x0, const MinimizeOptions& opts,
                             const Mat& inv_hessian0) {
  const Eigen::Index n = x0.size();
  MinimizeResult res;
  res.x = std::move(x0);
  res.grad.resize(n);
  res.value = f(res.x, &res.grad);
  if (!std::isfinite(res.value)) {
    res.status = "objective not finite at the starting point";
    return res;
  }
  Mat h = inv_hessian0.size() == n * n ? inv_hessian0 : Mat::Identity(n, n);
  bool reset_once = false;
  Vec g_new(n);

  for (res.iterations = 0; res.iterations < opts.max_iter; ++res.iterations) {
    if (res.grad.cwiseAbs().maxCoeff() <= opts.grad_tol) {
      res.converged = true;
      res.status = "gradient tolerance reached";
      return res;
    }
    Vec dir = -h * res.grad;
    double slope = dir.dot(res.grad);
    if (!(slope < 0.0)) {
      h.setIdentity();
      dir = -res.grad;
      slope = dir.dot(res.grad);
    }
    double step = 1.0;
    double f_new = std::numeric_limits<double>::infinity();
    Vec x_new(n);
    bool accepted = false;
    for (int k = 0; k < 40; ++k) {
      x_new = res.x + step * dir;
      f_new = f(x_new, &g_new);
      if (std::isfinite(f_new) && f_new <= res.value + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      // Near the optimum the decrease falls below rounding in f; accept a
      // step that does not raise f beyond rounding and shrinks the gradient.
      if (std::isfinite(f_new) &&
          f_new <= res.value + 1e-14 * std::max(1.0, std::fabs(res.value)) &&
          g_new.norm() < res.grad.norm()) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      if (!reset_once) {
        reset_once = true;
        h.setIdentity();
        continue;
      }
      res.status = "line search failed";
      return res;
    }
    reset_once = false;
    const Vec s = x_new - res.x;
    const Vec y = g_new - res.grad;
    const double f_old = res.value;
    res.x = x_new;
    res.value = f_new;
    res.grad = g_new;

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (res.iterations == 0 && inv_hessian0.size() != n * n) {
        h *= sy / y.squaredNorm();
      }
      const double rho = 1.0 / sy;
      const Vec hy = h * y;
      h += (rho * rho * y.dot(hy) + rho) * s * s.transpose() -
           rho * (hy * s.transpose() + s * hy.transpose());
    }
    if (opts.f_tol > 0.0 &&
        std::fabs(f_old - f_new) <= opts.f_tol * std::max(1.0, std::fabs(f_new))) {
      res.converged = true;
      res.status = "function tolerance reached";
      ++res.iterations;
      return res;
    }
  }
  res.converged = res.grad.cwiseAbs().maxCoeff() <= opts.grad_tol;
  res.status = res.converged ? "gradient tolerance reached" : "iteration limit";
  return res;
}

Mat numerical_hessian(const Objective& f, const Vec& x, double step) {
  const Eigen::Index n = x.size();
  Mat hess(n, n);
  Vec gp(n), gm(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double hj = step * std::max(1.0, std::fabs(x(j)));
    Vec xp = x, xm = x;
    xp(j) += hj;
    xm(j) -= hj;
    f(xp, &gp);
    f(xm, &gm);
    hess.col(j) = (gp - gm) / (2.0 * hj);
  }
  return 0.5 * (hess + hess.transpose());
}

Mat inverse_spd(const Mat& m) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() == Eigen::Success) {
    return llt.solve(Mat::Identity(m.rows(), m.cols()));
  }
  return m.completeOrthogonalDecomposition().pseudoInverse();
}

double brent_root(const std::function<double(double)>& f, double lo, double hi,
                  double x_tol, int max_iter) {
  double a = lo, b = hi;
  double fa = f(a), fb = f(b);
  if (fa == 0.0) return a;
  if (fb == 0.0) return b;
  if ((fa > 0.0) == (fb > 0.0)) throw std::domain_error("brent_root: root not bracketed");
  if (std::fabs(fa) < std::fabs(fb)) {
    std::swap(a, b);
    std::swap(fa, fb);
  }
  double c = a, fc = fa, d = b - a;
  bool bisected = true;
  for (int it = 0; it < max_iter; ++it) {
    if (fb == 0.0 || std::fabs(b - a) <= x_tol) return b;
    double s;
    if (fa != fc && fb != fc) {
      s = a * fb * fc / ((fa - fb) * (fa - fc)) + b * fa * fc / ((fb - fa) * (fb - fc)) +
          c * fa * fb / ((fc - fa) * (fc - fb));
    } else {
      s = b - fb * (b - a) / (fb - fa);
    }
    const double lo_s = (3.0 * a + b) / 4.0;
    const bool outside = (s - lo_s) * (s - b) > 0.0;
    if (outside || (bisected && std::fabs(s - b) >= std::fabs(b - c) / 2.0) ||
        (!bisected && std::fabs(s - b) >= std::fabs(c - d) / 2.0) ||
        (bisected && std::fabs(b - c) < x_tol) || (!bisected && std::fabs(c - d) < x_tol)) {
      s = 0.5 * (a + b);
      bisected = true;
    } else {
      bisected = false;
    }
    const double fs = f(s);
    d = c;
    c = b;
    fc = fb;
    if ((fa > 0.0) != (fs > 0.0)) {
      b = s;
      fb = fs;
    } else {
      a = s;
      fa = fs;
    }
    if (std::fabs(fa) < std::fabs(fb)) {
      std::swap(a, b);
      std::swap(fa, fb);
    }
  }
  return b;
}

}  // namespace sortsel
