#include "sortsel/distreg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sortsel/optim.hpp"
#include "sortsel/rows.hpp"

namespace sortsel {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kRhoMax = 0.999;

Vec unit_if_empty(const Vec& w, Eigen::Index n) {
  if (w.size() == 0) return Vec::Ones(n);
  if (w.size() != n) throw std::invalid_argument("weights length does not match data");
  return w;
}

std::string column_name(const std::vector<std::string>& names, int j) {
  if (j < static_cast<int>(names.size())) return names[j];
  return "column " + std::to_string(j);
}

int matrix_rank(const Mat& m) {
  if (m.cols() == 0) return 0;
  Eigen::ColPivHouseholderQR<Mat> qr(m);
  qr.setThreshold(1e-10);
  return static_cast<int>(qr.rank());
}

// Per-distinct-row data for a binary outcome.
struct Collapsed {
  Mat x;
  Vec y;
  Vec w;
};

Collapsed collapse(const Vec& y, const Mat& x, const Vec& w) {
  Mat key(x.rows(), x.cols() + 1);
  key << x, y;
  const RowGroups g = group_rows(key);
  Collapsed c;
  c.x.resize(g.count(), x.cols());
  c.y.resize(g.count());
  for (int k = 0; k < g.count(); ++k) {
    c.x.row(k) = x.row(g.representative[k]);
    c.y(k) = y(g.representative[k]);
  }
  c.w = group_totals(g, w);
  return c;
}

// Two-valued, non-constant columns whose value groups have a constant outcome.
std::vector<int> separating_columns(const Collapsed& c) {
  std::vector<int> out;
  for (int j = 0; j < c.x.cols(); ++j) {
    const double a = c.x(0, j);
    double b = a;
    bool binary = true;
    for (int i = 0; i < c.x.rows() && binary; ++i) {
      const double v = c.x(i, j);
      if (v == a) continue;
      if (b == a) b = v;
      else if (v != b) binary = false;
    }
    if (!binary || a == b) continue;
    double ones[2] = {0, 0}, zeros[2] = {0, 0};
    for (int i = 0; i < c.x.rows(); ++i) {
      const int side = c.x(i, j) == a ? 0 : 1;
      (c.y(i) > 0.5 ? ones : zeros)[side] += c.w(i);
    }
    if (ones[0] == 0 || zeros[0] == 0 || ones[1] == 0 || zeros[1] == 0) out.push_back(j);
  }
  return out;
}

// Log-likelihood, score and Hessian of the probit at `b`.
double probit_eval(const Collapsed& c, const Vec& b, Vec* grad, Mat* hess) {
  const Vec eta = c.x * b;
  double ll = 0.0;
  if (grad) grad->setZero(b.size());
  if (hess) hess->setZero(b.size(), b.size());
  for (int i = 0; i < c.x.rows(); ++i) {
    const double q = c.y(i) > 0.5 ? 1.0 : -1.0;
    const double e = eta(i);
    ll += c.w(i) * normal_log_cdf(q * e);
    if (!grad) continue;
    const double lam = q * inverse_mills(q * e);
    *grad += c.w(i) * lam * c.x.row(i).transpose();
    if (hess) hess->noalias() -= c.w(i) * lam * (lam + e) * c.x.row(i).transpose() * c.x.row(i);
  }
  return ll;
}

}  // namespace

ProbitFit probit_fit(const Vec& indicator, const Mat& design, const Vec& weights,
                     const std::vector<std::string>& names) {
  const Eigen::Index n = design.rows();
  if (indicator.size() != n) throw std::invalid_argument("indicator length does not match design");
  const Vec w = unit_if_empty(weights, n);
  double w1 = 0.0, w0 = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) (indicator(i) > 0.5 ? w1 : w0) += w(i);
  if (w1 <= 0.0 || w0 <= 0.0) {
    throw EstimationError("probit: outcome is constant (no variation to fit)");
  }

  const Collapsed full = collapse(indicator, design, w);
  ProbitFit fit;
  fit.dropped = separating_columns(full);
  for (int j : fit.dropped) {
    fit.warnings.push_back("probit: " + column_name(names, j) +
                           " predicts the outcome perfectly; dropped");
  }
  std::vector<int> keep;
  for (int j = 0; j < design.cols(); ++j) {
    if (std::find(fit.dropped.begin(), fit.dropped.end(), j) == fit.dropped.end()) keep.push_back(j);
  }
  Collapsed c{Mat(full.x.rows(), static_cast<Eigen::Index>(keep.size())), full.y, full.w};
  for (std::size_t k = 0; k < keep.size(); ++k) c.x.col(k) = full.x.col(keep[k]);

  if (matrix_rank(c.x) < c.x.cols()) {
    for (Eigen::Index k = 1; k <= c.x.cols(); ++k) {
      if (matrix_rank(c.x.leftCols(k)) < k) {
        throw EstimationError("probit: design is rank deficient at " +
                              column_name(names, keep[k - 1]));
      }
    }
  }

  const Eigen::Index p = c.x.cols();
  Vec b = Vec::Zero(p);
  Vec grad(p);
  Mat hess(p, p);
  double ll = probit_eval(c, b, &grad, &hess);
  const double wsum = w.sum();
  constexpr int kMaxIter = 200;
  for (fit.iterations = 0; fit.iterations < kMaxIter; ++fit.iterations) {
    if (grad.cwiseAbs().maxCoeff() / wsum <= 1e-12) {
      fit.converged = true;
      break;
    }
    const Vec step = (-hess).ldlt().solve(grad);
    double t = 1.0;
    Vec b_new = b + step;
    double ll_new = probit_eval(c, b_new, nullptr, nullptr);
    while (!(ll_new >= ll - 1e-12 * std::fabs(ll)) && t > 1e-10) {
      t *= 0.5;
      b_new = b + t * step;
      ll_new = probit_eval(c, b_new, nullptr, nullptr);
    }
    const double moved = (b_new - b).cwiseAbs().maxCoeff();
    b = b_new;
    ll = probit_eval(c, b, &grad, &hess);
    if (moved <= 1e-13 * (1.0 + b.cwiseAbs().maxCoeff())) {
      fit.converged = grad.cwiseAbs().maxCoeff() / wsum <= 1e-7;
      break;
    }
  }
  if (b.size() && b.cwiseAbs().maxCoeff() > 30.0) {
    fit.converged = false;
    fit.warnings.push_back("probit: coefficients diverging (quasi-separation)");
  }

  fit.coef = Vec::Zero(design.cols());
  fit.vcov = Mat::Zero(design.cols(), design.cols());
  const Mat v = inverse_spd(-hess);
  for (std::size_t a = 0; a < keep.size(); ++a) {
    fit.coef(keep[a]) = b(a);
    for (std::size_t k = 0; k < keep.size(); ++k) fit.vcov(keep[a], keep[k]) = v(a, k);
  }
  fit.loglik = ll;
  return fit;
}

Vec probit_predict(const ProbitFit& fit, const Mat& design) {
  return (design * fit.coef).unaryExpr([](double e) { return normal_cdf(e); });
}

// ---------------------------------------------------------------------------
// Bivariate probit.

namespace {

struct BiCollapsed {
  Mat z;
  Vec qw, qh, w;
};

// Mean negative log-likelihood over theta = (g_w, g_h, atanh rho) or, with
// a fixed rho, theta = (g_w, g_h).
double biprobit_negll(const BiCollapsed& c, const Vec& theta, std::optional<double> fixed_rho,
                      double wsum, Vec* grad) {
  const Eigen::Index p = c.z.cols();
  const double rho = fixed_rho ? *fixed_rho : std::tanh(theta(2 * p));
  if (!(std::fabs(rho) < 1.0)) return kInf;
  const Vec a = c.z * theta.head(p);
  const Vec b = c.z * theta.segment(p, p);
  const double s = std::sqrt(1.0 - rho * rho);
  double ll = 0.0;
  if (grad) grad->setZero(theta.size());
  for (Eigen::Index i = 0; i < c.z.rows(); ++i) {
    const double x1 = c.qw(i) * a(i), x2 = c.qh(i) * b(i), r = c.qw(i) * c.qh(i) * rho;
    const double prob = std::max(bvn_cdf(x1, x2, r), kProbFloor);
    ll += c.w(i) * std::log(prob);
    if (!grad) continue;
    const double da = c.qw(i) * normal_pdf(x1) * normal_cdf((x2 - r * x1) / s) / prob;
    const double db = c.qh(i) * normal_pdf(x2) * normal_cdf((x1 - r * x2) / s) / prob;
    grad->head(p) -= c.w(i) * da * c.z.row(i).transpose();
    grad->segment(p, p) -= c.w(i) * db * c.z.row(i).transpose();
    if (!fixed_rho) {
      const double dr = c.qw(i) * c.qh(i) * bvn_pdf(x1, x2, r) / prob;
      (*grad)(2 * p) -= c.w(i) * dr * (1.0 - rho * rho);
    }
  }
  if (grad) *grad /= wsum;
  return -ll / wsum;
}

}  // namespace

BiprobitFit biprobit_fit(const Vec& d_w, const Vec& d_h, const Mat& design, const Vec& weights,
                         std::optional<double> fixed_rho) {
  const Eigen::Index n = design.rows();
  if (d_w.size() != n || d_h.size() != n) {
    throw std::invalid_argument("biprobit: indicator length does not match design");
  }
  if (fixed_rho && !(std::fabs(*fixed_rho) < 1.0)) {
    throw std::domain_error("biprobit: fixed rho must lie in (-1, 1)");
  }
  const Vec w = unit_if_empty(weights, n);
  double cells[2][2] = {{0, 0}, {0, 0}};
  for (Eigen::Index i = 0; i < n; ++i) cells[d_w(i) > 0.5][d_h(i) > 0.5] += w(i);
  for (int a = 0; a < 2; ++a) {
    for (int b = 0; b < 2; ++b) {
      if (cells[a][b] <= 0.0) {
        throw EstimationError("biprobit: participation cell (d_w=" + std::to_string(a) +
                              ", d_h=" + std::to_string(b) + ") is empty");
      }
    }
  }

  const ProbitFit mw = probit_fit(d_w, design, w);
  const ProbitFit mh = probit_fit(d_h, design, w);

  Mat key(n, design.cols() + 2);
  key << design, d_w, d_h;
  const RowGroups g = group_rows(key);
  BiCollapsed c{Mat(g.count(), design.cols()), Vec(g.count()), Vec(g.count()),
                group_totals(g, w)};
  for (int k = 0; k < g.count(); ++k) {
    const int r = g.representative[k];
    c.z.row(k) = design.row(r);
    c.qw(k) = d_w(r) > 0.5 ? 1.0 : -1.0;
    c.qh(k) = d_h(r) > 0.5 ? 1.0 : -1.0;
  }
  const double wsum = w.sum();
  const Eigen::Index p = design.cols();
  Vec theta0(fixed_rho ? 2 * p : 2 * p + 1);
  theta0.head(p) = mw.coef;
  theta0.segment(p, p) = mh.coef;
  if (!fixed_rho) theta0(2 * p) = 0.0;

  const Objective f = [&](const Vec& th, Vec* gr) {
    return biprobit_negll(c, th, fixed_rho, wsum, gr);
  };
  MinimizeOptions opts;
  opts.grad_tol = 1e-8;
  opts.max_iter = 300;
  const MinimizeResult res = minimize_bfgs(f, theta0, opts);

  BiprobitFit fit;
  fit.gamma_w = res.x.head(p);
  fit.gamma_h = res.x.segment(p, p);
  fit.rho = fixed_rho ? *fixed_rho : std::tanh(res.x(2 * p));
  fit.rho_fixed = fixed_rho.has_value();
  fit.loglik = -res.value * wsum;
  fit.converged = res.converged;
  fit.iterations = res.iterations;
  fit.vcov = inverse_spd(numerical_hessian(f, res.x) * wsum);
  if (!fixed_rho) fit.rho_se = (1.0 - fit.rho * fit.rho) * std::sqrt(fit.vcov(2 * p, 2 * p));
  return fit;
}

// ---------------------------------------------------------------------------
// Threshold grid and distribution regression.

double ThresholdGrid::cut_w(int k) const { return k >= size - 1 ? kInf : cuts_w(k); }
double ThresholdGrid::cut_h(int k) const { return k >= size - 1 ? kInf : cuts_h(k); }

double empirical_quantile(const Vec& y, double tau, const Vec& weights) {
  if (y.size() == 0) throw std::invalid_argument("empirical_quantile: empty sample");
  if (!(tau > 0.0 && tau <= 1.0)) throw std::domain_error("empirical_quantile: tau outside (0, 1]");
  const Vec w = unit_if_empty(weights, y.size());
  std::vector<int> idx(y.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return y(a) < y(b); });
  const double total = w.sum();
  const double target = tau * total * (1.0 - 1e-12);
  double cum = 0.0;
  for (int i : idx) {
    cum += w(i);
    if (cum >= target) return y(i);
  }
  return y(idx.back());
}

ThresholdGrid make_grid(const Vec& y_w, const Vec& y_h, int size, const Vec& weights) {
  if (size < 2) throw std::invalid_argument("grid size must be at least 2");
  ThresholdGrid g;
  g.size = size;
  g.levels.resize(size - 1);
  g.cuts_w.resize(size - 1);
  g.cuts_h.resize(size - 1);
  for (int k = 0; k < size - 1; ++k) {
    g.levels(k) = static_cast<double>(k + 1) / size;
    g.cuts_w(k) = empirical_quantile(y_w, g.levels(k), weights);
    g.cuts_h(k) = empirical_quantile(y_h, g.levels(k), weights);
    if (k > 0 && (g.cuts_w(k) <= g.cuts_w(k - 1) || g.cuts_h(k) <= g.cuts_h(k - 1))) {
      throw EstimationError("grid: tied wages make cutoffs non-increasing at level " +
                            std::to_string(g.levels(k)));
    }
  }
  return g;
}

bool UdrFit::valid(int k) const {
  return std::find(skipped.begin(), skipped.end(), k) == skipped.end();
}

UdrFit udr_fit(const Vec& y, const Mat& design, const Vec& cuts, const Vec& weights) {
  UdrFit out;
  out.cuts = cuts;
  for (int k = 0; k < cuts.size(); ++k) {
    const Vec ind = (y.array() <= cuts(k)).cast<double>();
    try {
      ProbitFit f = probit_fit(ind, design, weights);
      for (const auto& msg : f.warnings) {
        out.warnings.push_back("cutoff " + std::to_string(k) + ": " + msg);
      }
      out.fits.push_back(std::move(f));
    } catch (const EstimationError& e) {
      out.skipped.push_back(k);
      out.warnings.push_back("cutoff " + std::to_string(k) + " skipped: " + e.what());
      out.fits.emplace_back();
    }
  }
  return out;
}

Mat udr_fitted_cdf(const UdrFit& fit, const Mat& design) {
  const int m = static_cast<int>(fit.cuts.size());
  std::vector<int> ok;
  for (int k = 0; k < m; ++k) {
    if (fit.valid(k)) ok.push_back(k);
  }
  if (ok.empty()) throw EstimationError("udr: no cutoff could be fitted");
  Mat cdf(design.rows(), m);
  for (int k : ok) cdf.col(k) = probit_predict(fit.fits[k], design);
  for (int k = 0; k < m; ++k) {
    if (fit.valid(k)) continue;
    auto hi = std::upper_bound(ok.begin(), ok.end(), k);
    if (hi == ok.begin()) {
      cdf.col(k) = cdf.col(*hi);
    } else if (hi == ok.end()) {
      cdf.col(k) = cdf.col(*(hi - 1));
    } else {
      const int a = *(hi - 1), b = *hi;
      const double t = static_cast<double>(k - a) / (b - a);
      cdf.col(k) = (1.0 - t) * cdf.col(a) + t * cdf.col(b);
    }
  }
  for (Eigen::Index i = 0; i < cdf.rows(); ++i) {
    Vec row = cdf.row(i).transpose();
    std::sort(row.data(), row.data() + row.size());
    cdf.row(i) = row.transpose();
  }
  return cdf;
}

// ---------------------------------------------------------------------------
// Bivariate distribution regression.

namespace {

struct RhoData {
  Vec x1, x2, sign, w;  // orthant limits q_w mu_w, q_h mu_h and sign q_w q_h
};

RhoData rho_data(const Vec& ind_w, const Vec& ind_h, const Vec& mu_w, const Vec& mu_h,
                 const Vec& weights) {
  const Eigen::Index n = ind_w.size();
  if (ind_h.size() != n || mu_w.size() != n || mu_h.size() != n) {
    throw std::invalid_argument("bdr: input lengths differ");
  }
  const Vec w = unit_if_empty(weights, n);
  Mat key(n, 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!std::isfinite(mu_w(i)) || !std::isfinite(mu_h(i))) {
      throw std::domain_error("bdr: fitted index is not finite");
    }
    const double qw = ind_w(i) > 0.5 ? 1.0 : -1.0;
    const double qh = ind_h(i) > 0.5 ? 1.0 : -1.0;
    key.row(i) << qw * mu_w(i), qh * mu_h(i), qw * qh, 0.0;
  }
  const RowGroups g = group_rows(key.leftCols(3));
  RhoData d{Vec(g.count()), Vec(g.count()), Vec(g.count()), group_totals(g, w)};
  for (int k = 0; k < g.count(); ++k) {
    const int r = g.representative[k];
    d.x1(k) = key(r, 0);
    d.x2(k) = key(r, 1);
    d.sign(k) = key(r, 2);
  }
  return d;
}

double rho_loglik(const RhoData& d, double rho) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < d.x1.size(); ++i) {
    ll += d.w(i) * std::log(std::max(bvn_cdf(d.x1(i), d.x2(i), d.sign(i) * rho), kProbFloor));
  }
  return ll;
}

double rho_score(const RhoData& d, double rho) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < d.x1.size(); ++i) {
    const double r = d.sign(i) * rho;
    const double p = std::max(bvn_cdf(d.x1(i), d.x2(i), r), kProbFloor);
    s += d.w(i) * d.sign(i) * bvn_pdf(d.x1(i), d.x2(i), r) / p;
  }
  return s;
}

}  // namespace

double bdr_loglik(const Vec& ind_w, const Vec& ind_h, const Vec& mu_w, const Vec& mu_h,
                  double rho, const Vec& weights) {
  return rho_loglik(rho_data(ind_w, ind_h, mu_w, mu_h, weights), rho);
}

RhoFit bdr_rho_fit(const Vec& ind_w, const Vec& ind_h, const Vec& mu_w, const Vec& mu_h,
                   const Vec& weights) {
  const RhoData d = rho_data(ind_w, ind_h, mu_w, mu_h, weights);
  RhoFit fit;
  const double s_lo = rho_score(d, -kRhoMax);
  const double s_hi = rho_score(d, kRhoMax);
  if (s_lo <= 0.0) {
    fit.rho = -kRhoMax;
    fit.boundary = true;
  } else if (s_hi >= 0.0) {
    fit.rho = kRhoMax;
    fit.boundary = true;
  } else {
    fit.rho = brent_root([&](double r) { return rho_score(d, r); }, -kRhoMax, kRhoMax, 1e-12);
    fit.converged = true;
  }
  fit.loglik = rho_loglik(d, fit.rho);

  // Curvature of the log-likelihood in atanh(rho) by central differences of
  // the score; the score in theta is score_rho * (1 - rho^2).
  const double theta = std::atanh(fit.rho);
  const double h = 1e-4;
  auto score_theta = [&](double t) {
    const double r = std::tanh(t);
    return rho_score(d, r) * (1.0 - r * r);
  };
  const double curv = (score_theta(theta + h) - score_theta(theta - h)) / (2.0 * h);
  fit.se = curv < 0.0 ? (1.0 - fit.rho * fit.rho) / std::sqrt(-curv)
                      : std::numeric_limits<double>::quiet_NaN();
  return fit;
}

BdrFit bdr_fit(const Vec& y_w, const Vec& y_h, const Mat& design_w, const Mat& design_h,
               const ThresholdGrid& grid, const Vec& weights) {
  BdrFit out;
  out.w = udr_fit(y_w, design_w, grid.cuts_w, weights);
  out.h = udr_fit(y_h, design_h, grid.cuts_h, weights);
  const Mat cdf_w = udr_fitted_cdf(out.w, design_w);
  const Mat cdf_h = udr_fitted_cdf(out.h, design_h);
  const int m = grid.size - 1;
  out.rho.resize(m, m);
  out.rho_se.resize(m, m);
  out.loglik.resize(m, m);
  auto index = [](const Vec& p) { return p.unaryExpr([](double v) { return normal_quantile_clamped(v); }); };
  for (int k = 0; k < m; ++k) {
    const Vec ind_w = (y_w.array() <= grid.cuts_w(k)).cast<double>();
    const Vec mu_w = index(cdf_w.col(k));
    for (int l = 0; l < m; ++l) {
      const Vec ind_h = (y_h.array() <= grid.cuts_h(l)).cast<double>();
      const RhoFit r = bdr_rho_fit(ind_w, ind_h, mu_w, index(cdf_h.col(l)), weights);
      out.rho(k, l) = r.rho;
      out.rho_se(k, l) = r.se;
      out.loglik(k, l) = r.loglik;
    }
  }
  return out;
}

}  // namespace sortsel
