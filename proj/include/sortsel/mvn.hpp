#pragma once

// Multivariate standard normal probabilities for dimensions 1..4.
//
// Orientation: every routine here works with lower orthants,
// P(X_1 <= b_1, ..., X_N <= b_N) for X ~ N(0, R) with R a correlation matrix.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace sortsel {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Raised when a correlation matrix is malformed or cannot be factorized.
class MatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kPdEps = 1e-8;
inline constexpr double kProbFloor = 1e-300;

// ---------------------------------------------------------------------------
// Univariate and bivariate normal.

/// Standard normal CDF. NaN in, NaN out.
double normal_cdf(double x);
double normal_pdf(double x);
/// log Phi(x), accurate far into the lower tail.
double normal_log_cdf(double x);
/// phi(x) / Phi(x), accurate far into the lower tail.
double inverse_mills(double x);
/// Inverse of normal_cdf; throws std::domain_error unless 0 < p < 1.
double normal_quantile(double p);
/// Inverse without the domain check, clamped to (kProbFloor, 1 - 1e-16).
double normal_quantile_clamped(double p) noexcept;

/// Phi_2(x1, x2; rho), deterministic Gauss-Legendre evaluation
/// (Drezner-Wesolowsky / Genz). Throws std::domain_error if |rho| >= 1.
double bvn_cdf(double x1, double x2, double rho);
/// Bivariate standard normal density. Throws std::domain_error if |rho| >= 1.
double bvn_pdf(double x1, double x2, double rho);

// ---------------------------------------------------------------------------
// Correlation matrices.

/// Symmetric, unit-diagonal, positive definite matrix of dimension 2..4.
class CorrelationMatrix {
 public:
  /// Validates symmetry, unit diagonal and smallest eigenvalue > pd_eps.
  explicit CorrelationMatrix(Mat m, double pd_eps = kPdEps);

  static CorrelationMatrix identity(int dim);
  static CorrelationMatrix equicorrelated(int dim, double rho);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Mat& matrix() const { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }
  double min_eigenvalue() const;

  /// Reorder dimensions: result(i, j) = (*this)(perm[i], perm[j]).
  CorrelationMatrix permuted(const std::vector<int>& perm) const;

 private:
  Mat m_;
};

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Mat& m);

struct PdProjection {
  CorrelationMatrix corr;
  bool changed = false;
  double max_abs_change = 0.0;
};

/// Eigenvalue clipping at pd_eps followed by diagonal renormalization.
/// Input that is already PD is returned unchanged.
PdProjection project_to_pd(const Mat& m, double pd_eps = kPdEps);

// ---------------------------------------------------------------------------
// GHK simulator.

enum class DrawSequence { halton, pseudo_random };

struct GhkOptions {
  int draws = 1024;
  std::uint64_t seed = 0;
  DrawSequence sequence = DrawSequence::halton;
};

/// R x D matrix of uniforms in (0, 1): a randomly shifted Halton set
/// (Cranley-Patterson rotation keyed by the seed) or plain pseudo-random draws.
/// Rows are draws. Deterministic given (draws, dims, seed, sequence).
class UniformPointSet {
 public:
  UniformPointSet() = default;
  UniformPointSet(int draws, int dims, std::uint64_t seed,
                  DrawSequence sequence = DrawSequence::halton);

  int draws() const { return static_cast<int>(u_.rows()); }
  int dims() const { return static_cast<int>(u_.cols()); }
  double operator()(int r, int d) const { return u_(r, d); }
  const Mat& matrix() const { return u_; }

 private:
  Mat u_;
};

struct GhkResult {
  double prob = 0.0;
  /// Sample standard error of the per-draw importance weights.
  double std_error = 0.0;
};

/// Phi_N(upper; corr) by sequential conditioning through the Cholesky factor,
/// in input order. Entries at +inf are dropped before factorization; any
/// -inf entry short-circuits to 0.
GhkResult mvn_cdf_ghk(const Vec& upper, const CorrelationMatrix& corr,
                      const GhkOptions& opts);

/// Same, with an explicit point set shared across calls (common random
/// numbers). The point set needs at least dim - 1 columns.
GhkResult mvn_cdf_ghk(const Vec& upper, const CorrelationMatrix& corr,
                      const UniformPointSet& points);

/// Signed inclusion-exclusion over the 2^N box corners, all corners sharing
/// one point set. Clamped at 0.
GhkResult mvn_rectangle(const Vec& lower, const Vec& upper,
                        const CorrelationMatrix& corr, const GhkOptions& opts);

/// d Phi_N(x; R) / d R(i, j) for N in {3, 4}: the expectation of the
/// conditional bivariate density of (X_i, X_j) over the remaining coordinates
/// restricted to their orthant, times that orthant's probability, divided by
/// the conditional standard deviations. The remaining coordinates are drawn
/// by GHK. Indices are zero-based.
GhkResult mvn_cdf_drho(const Vec& x, const CorrelationMatrix& corr, int i,
                       int j, const GhkOptions& opts);

/// Conditional moments of (X_i, X_j) given the other coordinates.
struct ConditionalBlock {
  double sigma_1 = 1.0;      // sd of X_i | rest
  double sigma_2 = 1.0;      // sd of X_j | rest
  double rho_12 = 0.0;       // conditional correlation
  Vec coef_1;                // E[X_i | rest] = coef_1' rest
  Vec coef_2;
};

ConditionalBlock conditional_block(const CorrelationMatrix& corr, int i, int j);

}  // namespace sortsel
