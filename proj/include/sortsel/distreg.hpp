#pragma once

// Probit, bivariate probit and distribution regression.
//
// Indicator vectors are Eigen vectors holding 0.0 / 1.0. Weight vectors may be
// empty, meaning unit weights. Design matrices carry one row per observation
// and include the intercept column when one is wanted.

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sortsel/mvn.hpp"

namespace sortsel {

/// Raised for data that cannot be fit (degenerate outcomes, rank deficiency,
/// empty cells).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ProbitFit {
  Vec coef;
  double loglik = 0.0;
  Mat vcov;
  bool converged = false;
  int iterations = 0;
  /// Columns dropped for perfect prediction; their coefficient is fixed at 0.
  std::vector<int> dropped;
  std::vector<std::string> warnings;

  Vec se() const { return vcov.diagonal().cwiseSqrt(); }
};

/// Bernoulli-probit MLE by Newton-Raphson on the globally concave
/// log-likelihood. `names` labels columns in error messages.
ProbitFit probit_fit(const Vec& indicator, const Mat& design, const Vec& weights = Vec(),
                     const std::vector<std::string>& names = {});

/// P(D = 1 | x) for every row.
Vec probit_predict(const ProbitFit& fit, const Mat& design);

struct BiprobitFit {
  Vec gamma_w;
  Vec gamma_h;
  double rho = 0.0;
  double rho_se = 0.0;
  double loglik = 0.0;
  /// Covariance of (gamma_w, gamma_h, atanh(rho)).
  Mat vcov;
  bool converged = false;
  bool rho_fixed = false;
  int iterations = 0;
};

/// Bivariate probit for P(d_w = 1, d_h = 1 | z) = Phi_2(z'g_w, z'g_h; rho).
/// rho is optimized as atanh(rho). With `fixed_rho` the correlation is held.
BiprobitFit biprobit_fit(const Vec& d_w, const Vec& d_h, const Mat& design,
                         const Vec& weights = Vec(),
                         std::optional<double> fixed_rho = std::nullopt);

/// Cutoffs per spouse for a grid of `size` cells per axis. The interior
/// levels are k / size for k = 1..size-1; the top cell is open (y = +inf).
struct ThresholdGrid {
  int size = 10;
  Vec levels;   // size - 1 interior levels
  Vec cuts_w;   // size - 1 strictly increasing cutoffs
  Vec cuts_h;

  /// Cutoff for cell index k in 0..size-1; k == size-1 is +inf.
  double cut_w(int k) const;
  double cut_h(int k) const;
};

/// inf{y : F_n(y) >= tau} on the (optionally weighted) sample.
double empirical_quantile(const Vec& y, double tau, const Vec& weights = Vec());

/// Decile-style grid from the two wage samples. Throws EstimationError when
/// ties make cutoffs non-increasing.
ThresholdGrid make_grid(const Vec& y_w, const Vec& y_h, int size,
                        const Vec& weights = Vec());

struct UdrFit {
  Vec cuts;
  /// One entry per cutoff; entries listed in `skipped` are placeholders.
  std::vector<ProbitFit> fits;
  std::vector<int> skipped;
  std::vector<std::string> warnings;

  bool valid(int k) const;
};

/// One probit of 1(y <= cut) on the design per cutoff.
UdrFit udr_fit(const Vec& y, const Mat& design, const Vec& cuts, const Vec& weights = Vec());

/// Fitted conditional CDF at every cutoff (rows = observations), monotonized
/// across cutoffs by sorting each row. Skipped cutoffs are interpolated from
/// their neighbours.
Mat udr_fitted_cdf(const UdrFit& fit, const Mat& design);

struct RhoFit {
  double rho = 0.0;
  double se = 0.0;
  double loglik = 0.0;
  bool converged = false;
  bool boundary = false;
};

/// One-parameter bivariate probit for the correlation with both indices held
/// at plug-in values: ind_w = 1(Y_w <= y_w) with P = Phi(mu_w), likewise h.
RhoFit bdr_rho_fit(const Vec& ind_w, const Vec& ind_h, const Vec& mu_w, const Vec& mu_h,
                   const Vec& weights = Vec());

/// Bivariate log-likelihood sum_i w_i log Phi_2(q_w mu_w, q_h mu_h; q_w q_h rho).
double bdr_loglik(const Vec& ind_w, const Vec& ind_h, const Vec& mu_w, const Vec& mu_h,
                  double rho, const Vec& weights = Vec());

/// Selection-free bivariate distribution regression at every cutoff pair.
struct BdrFit {
  UdrFit w;
  UdrFit h;
  Mat rho;     // (size-1) x (size-1)
  Mat rho_se;
  Mat loglik;
};

BdrFit bdr_fit(const Vec& y_w, const Vec& y_h, const Mat& design_w, const Mat& design_h,
               const ThresholdGrid& grid, const Vec& weights = Vec());

}  // namespace sortsel
