#include "sortsel/identification.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <unsupported/Eigen/LevenbergMarquardt>

#include "sortsel/distreg.hpp"
#include "sortsel/optim.hpp"
#include "sortsel/rows.hpp"

namespace sortsel {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Weighted cell frequencies per distinct z row.
struct Cells {
  Mat z_rows, x_rows;
  std::vector<int> x_of_z;
  Vec total, p_w, p_h, p11, p_yw, p_yh, p_yy;
  int count() const { return static_cast<int>(total.size()); }
};

Cells tabulate(const HouseholdData& d, double y_w, double y_h) {
  const Mat z = participation_design(d);
  const RowGroups zg = group_rows(z);
  const int nz = zg.count();
  const Eigen::Index kx = 1 + d.x.cols();
  Cells c;
  c.z_rows.resize(nz, z.cols());
  for (int g = 0; g < nz; ++g) c.z_rows.row(g) = z.row(zg.representative[g]);
  const Mat xr = c.z_rows.leftCols(kx);
  const RowGroups xg = group_rows(xr);
  c.x_of_z = xg.group_of;
  c.x_rows.resize(xg.count(), kx);
  for (int g = 0; g < xg.count(); ++g) c.x_rows.row(g) = xr.row(xg.representative[g]);

  c.total = Vec::Zero(nz);
  c.p_w = c.p_h = c.p11 = c.p_yw = c.p_yh = c.p_yy = Vec::Zero(nz);
  for (int i = 0; i < d.size(); ++i) {
    const int g = zg.group_of[i];
    const double w = d.weight(i);
    c.total(g) += w;
    c.p_w(g) += w * d.d_w(i);
    c.p_h(g) += w * d.d_h(i);
    if (!d.works(i)) continue;
    c.p11(g) += w;
    const bool lw = d.y_w(i) <= y_w, lh = d.y_h(i) <= y_h;
    c.p_yw(g) += lw ? w : 0.0;
    c.p_yh(g) += lh ? w : 0.0;
    c.p_yy(g) += lw && lh ? w : 0.0;
  }
  for (Vec* v : {&c.p_w, &c.p_h, &c.p11, &c.p_yw, &c.p_yh, &c.p_yy})
    *v = v->cwiseQuotient(c.total);
  return c;
}

// P(u_Dw <= a, u_Dh <= b, e_w <= m_w, e_h <= m_h); NaN when Sigma is not PD.
double orthant(const std::array<double, 6>& rho, double a, double b, double m_w, double m_h,
               const UniformPointSet& points) {
  LocalParams p;
  p.rho = rho;
  const Mat s = sigma_matrix(p);
  if (!(min_eigenvalue(s) > kPdEps)) return kNaN;
  Vec upper(4);
  upper << a, b, m_w, m_h;
  return mvn_cdf_ghk(upper, CorrelationMatrix(s), points).prob;
}

double& at(std::array<double, 6>& rho, Rho r) { return rho[static_cast<int>(r)]; }

int count_sign_changes(const Vec& v) {
  int changes = 0;
  double prev = kNaN;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v(i))) continue;
    if (std::isfinite(prev) && ((prev > 0.0) != (v(i) > 0.0))) ++changes;
    prev = v(i);
  }
  return changes;
}

// Scans a pooled residual and returns the root in the first bracketing
// interval, or NaN.
double scan_and_solve(const std::function<double(double)>& residual, Rho rho,
                      const IdentificationOptions& opts, std::vector<RhoScan>& scans) {
  RhoScan scan;
  scan.rho = rho;
  scan.grid = Vec::LinSpaced(opts.scan_points, -opts.scan_limit, opts.scan_limit);
  scan.residual.resize(opts.scan_points);
  for (int k = 0; k < opts.scan_points; ++k) scan.residual(k) = residual(scan.grid(k));
  scan.sign_changes = count_sign_changes(scan.residual);
  double root = kNaN;
  int prev = -1;
  for (int k = 0; k < opts.scan_points && std::isnan(root); ++k) {
    if (!std::isfinite(scan.residual(k))) continue;
    if (prev >= 0 && (scan.residual(prev) > 0.0) != (scan.residual(k) > 0.0)) {
      root = brent_root(residual, scan.grid(prev), scan.grid(k), 1e-10);
    }
    prev = k;
  }
  scans.push_back(std::move(scan));
  return root;
}

struct StepTwo {
  Vec mu_y;
  double own = 0.0, cross = 0.0;
  double conditioning = 0.0;
  bool converged = false;
};

// Weighted least squares for one spouse's wage index per x and its two
// participation-wage correlations.
StepTwo step_two(const Cells& c, const std::vector<int>& valid, const Vec& mu_dw,
                 const Vec& mu_dh, double rho_dd, bool wife, const UniformPointSet& points) {
  const Vec& observed = wife ? c.p_yw : c.p_yh;
  const int nx = static_cast<int>(c.x_rows.rows());
  const Rho own = wife ? Rho::dwyw : Rho::dhyh;
  const Rho cross = wife ? Rho::dhyw : Rho::dwyh;

  Vec inv_var(c.count());
  for (int g : valid) {
    const double p = observed(g);
    inv_var(g) = c.total(g) / std::max(p * (1.0 - p), 1e-12);
  }
  auto predict = [&](const Vec& theta, int g) {
    std::array<double, 6> rho{};
    at(rho, Rho::dwdh) = rho_dd;
    at(rho, own) = std::tanh(theta(nx));
    at(rho, cross) = std::tanh(theta(nx + 1));
    const double m = theta(c.x_of_z[g]);
    return orthant(rho, mu_dw(g), mu_dh(g), wife ? m : kInf, wife ? kInf : m, points);
  };
  // Start from the selection-free index: Phi^-1 of the conditional frequency.
  Vec theta = Vec::Zero(nx + 2);
  Vec num = Vec::Zero(nx), den = Vec::Zero(nx);
  for (int g : valid) {
    num(c.x_of_z[g]) += c.total(g) * observed(g);
    den(c.x_of_z[g]) += c.total(g) * c.p11(g);
  }
  for (int x = 0; x < nx; ++x)
    theta(x) = den(x) > 0.0 ? normal_quantile_clamped(num(x) / den(x)) : 0.0;

  // Standardized residuals; a non-PD trial point gets a large residual so
  // the damping rejects it.
  struct Residuals : Eigen::DenseFunctor<double> {
    std::function<double(const Vec&, int)> predict;
    const std::vector<int>* valid = nullptr;
    const Vec* observed = nullptr;
    const Vec* inv_var = nullptr;
    Residuals(int inputs, int values) : Eigen::DenseFunctor<double>(inputs, values) {}
    int operator()(const Vec& theta, Vec& out) const {
      for (std::size_t r = 0; r < valid->size(); ++r) {
        const int g = (*valid)[r];
        const double p = predict(theta, g);
        out(r) = std::isfinite(p) ? (p - (*observed)(g)) * std::sqrt((*inv_var)(g)) : 1e6;
      }
      return 0;
    }
    int df(const Vec& theta, Mat& jac) const {
      Vec fp(values()), fm(values());
      for (Eigen::Index k = 0; k < theta.size(); ++k) {
        Vec tp = theta, tm = theta;
        tp(k) += 1e-6;
        tm(k) -= 1e-6;
        (*this)(tp, fp);
        (*this)(tm, fm);
        jac.col(k) = (fp - fm) / 2e-6;
      }
      return 0;
    }
  };
  Residuals fn(nx + 2, static_cast<int>(valid.size()));
  fn.predict = predict;
  fn.valid = &valid;
  fn.observed = &observed;
  fn.inv_var = &inv_var;
  Eigen::LevenbergMarquardt<Residuals> lm(fn);
  lm.setMaxfev(200);
  lm.setXtol(1e-10);
  lm.setFtol(1e-12);
  namespace lms = Eigen::LevenbergMarquardtSpace;
  const lms::Status status = lm.minimize(theta);

  StepTwo out;
  out.mu_y = theta.head(nx);
  out.own = std::tanh(theta(nx));
  out.cross = std::tanh(theta(nx + 1));
  out.converged = status == lms::RelativeReductionTooSmall || status == lms::RelativeErrorTooSmall ||
                  status == lms::RelativeErrorAndReductionTooSmall || status == lms::CosinusTooSmall;

  // Column-normalized weighted Jacobian.
  Mat jac(valid.size(), nx + 2);
  for (Eigen::Index k = 0; k < nx + 2; ++k) {
    Vec tp = theta, tm = theta;
    tp(k) += 1e-5;
    tm(k) -= 1e-5;
    for (std::size_t r = 0; r < valid.size(); ++r) {
      const int g = valid[r];
      jac(r, k) = (predict(tp, g) - predict(tm, g)) / 2e-5 * std::sqrt(inv_var(g));
    }
  }
  for (Eigen::Index k = 0; k < jac.cols(); ++k) {
    const double norm = jac.col(k).norm();
    if (norm > 0.0) jac.col(k) /= norm;
  }
  const Vec sv = Eigen::JacobiSVD<Mat>(jac).singularValues();
  out.conditioning = sv.maxCoeff() > 0.0 ? sv.minCoeff() / sv.maxCoeff() : 0.0;
  if (!std::isfinite(out.conditioning)) out.conditioning = 0.0;
  return out;
}

}  // namespace

IdentificationReport identification_check(const SimulatedSample& sample, const DgpSpec& truth,
                                          const IdentificationOptions& opts) {
  const HouseholdData& d = sample.data;
  IdentificationReport rep;
  const std::vector<int> work = d.working();
  if (work.empty()) throw EstimationError("identification: no working couples");
  {
    const HouseholdData sel = d.subset(work);
    rep.y_w = empirical_quantile(sel.y_w, opts.level_w, sel.weight);
    rep.y_h = empirical_quantile(sel.y_h, opts.level_h, sel.weight);
  }
  const Cells c = tabulate(d, rep.y_w, rep.y_h);
  const int nz = c.count();
  rep.z_rows = c.z_rows;
  rep.x_rows = c.x_rows;

  // Step 1.
  std::vector<int> valid;
  rep.mu_dw = rep.mu_dh = Vec::Constant(nz, kNaN);
  for (int g = 0; g < nz; ++g) {
    const bool interior = c.p_w(g) > 0.0 && c.p_w(g) < 1.0 && c.p_h(g) > 0.0 &&
                          c.p_h(g) < 1.0 && c.p11(g) > 0.0;
    if (!interior) {
      rep.notes.push_back("z cell " + std::to_string(g) + " has a degenerate frequency; skipped");
      continue;
    }
    valid.push_back(g);
    rep.mu_dw(g) = normal_quantile(c.p_w(g));
    rep.mu_dh(g) = normal_quantile(c.p_h(g));
  }
  if (valid.empty()) throw EstimationError("identification: every z cell is degenerate");
  double total = 0.0;
  for (int g : valid) total += c.total(g);

  auto pooled = [&](auto&& model, const Vec& observed) {
    double f = 0.0;
    for (int g : valid) {
      const double p = model(g);
      if (!std::isfinite(p)) return kNaN;
      f += c.total(g) * (p - observed(g));
    }
    return f / total;
  };

  at(rep.rho, Rho::dwdh) = brent_root(
      [&](double r) {
        return pooled([&](int g) { return bvn_cdf(rep.mu_dw(g), rep.mu_dh(g), r); }, c.p11);
      },
      -0.999, 0.999, 1e-12);
  const double rho_dd = rep[Rho::dwdh];

  // Step 2.
  const UniformPointSet points(opts.draws, 3, opts.seed);
  const StepTwo wife = step_two(c, valid, rep.mu_dw, rep.mu_dh, rho_dd, true, points);
  const StepTwo husband = step_two(c, valid, rep.mu_dw, rep.mu_dh, rho_dd, false, points);
  if (!wife.converged) rep.notes.push_back("wife step-2 least squares did not converge");
  if (!husband.converged) rep.notes.push_back("husband step-2 least squares did not converge");
  rep.mu_yw = wife.mu_y;
  rep.mu_yh = husband.mu_y;
  at(rep.rho, Rho::dwyw) = wife.own;
  at(rep.rho, Rho::dhyh) = husband.own;
  rep.step2_dhyw = wife.cross;
  rep.step2_dwyh = husband.cross;
  rep.conditioning = std::min(wife.conditioning, husband.conditioning);
  rep.flat = rep.conditioning < opts.flat_threshold;
  if (rep.flat) {
    rep.notes.push_back(
        "step-2 objective is flat: excluded covariates do not shift participation");
  }

  // Step 3: cross correlations one at a time, others from step 2.
  auto solve_cross = [&](bool wife_wage) {
    const Rho own = wife_wage ? Rho::dwyw : Rho::dhyh;
    const Rho cross = wife_wage ? Rho::dhyw : Rho::dwyh;
    const Vec& mu_y = wife_wage ? rep.mu_yw : rep.mu_yh;
    const double fallback = wife_wage ? rep.step2_dhyw : rep.step2_dwyh;
    auto residual = [&](double r) {
      std::array<double, 6> rho{};
      at(rho, Rho::dwdh) = rho_dd;
      at(rho, own) = rep[own];
      at(rho, cross) = r;
      return pooled(
          [&](int g) {
            const double m = mu_y(c.x_of_z[g]);
            return orthant(rho, rep.mu_dw(g), rep.mu_dh(g), wife_wage ? m : kInf,
                           wife_wage ? kInf : m, points);
          },
          wife_wage ? c.p_yw : c.p_yh);
    };
    const double root = scan_and_solve(residual, cross, opts, rep.scans);
    if (std::isnan(root)) {
      rep.notes.push_back(rho_name(cross) + ": no sign change; step-2 value kept");
      at(rep.rho, cross) = fallback;
    } else {
      at(rep.rho, cross) = root;
    }
  };
  solve_cross(true);
  solve_cross(false);

  // Step 4.
  {
    auto residual = [&](double r) {
      std::array<double, 6> rho = rep.rho;
      at(rho, Rho::ywyh) = r;
      return pooled(
          [&](int g) {
            return orthant(rho, rep.mu_dw(g), rep.mu_dh(g), rep.mu_yw(c.x_of_z[g]),
                           rep.mu_yh(c.x_of_z[g]), points);
          },
          c.p_yy);
    };
    const double root = scan_and_solve(residual, Rho::ywyh, opts, rep.scans);
    if (std::isnan(root)) rep.notes.push_back("rho_ywyh: no sign change");
    at(rep.rho, Rho::ywyh) = root;
  }

  // Truth and errors.
  rep.true_rho = truth.rho;
  rep.true_mu_dw = c.z_rows * truth.gamma_w;
  rep.true_mu_dh = c.z_rows * truth.gamma_h;
  rep.true_mu_yw = c.x_rows * true_beta(truth.wage_w, rep.y_w);
  rep.true_mu_yh = c.x_rows * true_beta(truth.wage_h, rep.y_h);
  double err = 0.0;
  auto track = [&](double est, double tru) {
    err = std::isfinite(est) ? std::max(err, std::fabs(est - tru)) : kInf;
  };
  for (int g : valid) {
    track(rep.mu_dw(g), rep.true_mu_dw(g));
    track(rep.mu_dh(g), rep.true_mu_dh(g));
  }
  for (Eigen::Index x = 0; x < c.x_rows.rows(); ++x) {
    track(rep.mu_yw(x), rep.true_mu_yw(x));
    track(rep.mu_yh(x), rep.true_mu_yh(x));
  }
  for (Rho r : kAllRhos) track(rep[r], truth[r]);
  rep.max_error = err;
  return rep;
}

IdentificationReport identification_check(const DgpSpec& dgp, int n,
                                          const IdentificationOptions& opts) {
  DgpSpec s = dgp;
  s.n = n;
  return identification_check(simulate(s), s, opts);
}

}  // namespace sortsel
