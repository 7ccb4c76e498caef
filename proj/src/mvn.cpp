#include "sortsel/mvn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace sortsel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTwoPi = 2.0 * std::numbers::pi;

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x * std::numbers::sqrt2 / 2.0); }

double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(kTwoPi);
}

double normal_log_cdf(double x) {
  if (x > -30.0) return std::log(normal_cdf(x));
  const double x2 = x * x;
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(kTwoPi) +
         std::log1p(-1.0 / x2 + 3.0 / (x2 * x2));
}

double inverse_mills(double x) {
  if (x > -30.0) return normal_pdf(x) / normal_cdf(x);
  const double x2 = x * x;
  return -x / (1.0 - 1.0 / x2 + 3.0 / (x2 * x2));
}

// Wichura's AS241 (PPND16), relative accuracy about 1e-16.
double normal_quantile_clamped(double p) noexcept {
  p = std::clamp(p, kProbFloor, 1.0 - 1e-16);
  const double q = p - 0.5;
  double val;
  if (std::fabs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    val = q *
          (((((((r * 2509.0809287301226727 + 33430.575583588128105) * r +
                67265.770927008700853) * r + 45921.953931549871457) * r +
              13731.693765509461125) * r + 1971.5909503065514427) * r +
            133.14166789178437745) * r + 3.387132872796366608) /
          (((((((r * 5226.495278852545925 + 28729.085735721942674) * r +
                39307.89580009271061) * r + 21213.794301586595867) * r +
              5394.1960214247511077) * r + 687.1870074920579083) * r +
            42.313330701600911252) * r + 1.0);
    return val;
  }
  double r = q < 0 ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  if (r <= 5.0) {
    r -= 1.6;
    val = (((((((r * 7.7454501427834140764e-4 + .0227238449892691845833) * r +
                .24178072517745061177) * r + 1.27045825245236838258) * r +
              3.64784832476320460504) * r + 5.7694972214606914055) * r +
            4.6303378461565452959) * r + 1.42343711074968357734) /
          (((((((r * 1.05075007164441684324e-9 + 5.475938084995344946e-4) * r +
                .0151986665636164571966) * r + .14810397642748007459) * r +
              .68976733498510000455) * r + 1.6763848301838038494) * r +
            2.05319162663775882187) * r + 1.0);
  } else {
    r -= 5.0;
    val = (((((((r * 2.01033439929228813265e-7 + 2.71155556874348757815e-5) * r +
                .0012426609473880784386) * r + .026532189526576123093) * r +
              .29656057182850489123) * r + 1.7848265399172913358) * r +
            5.4637849111641143699) * r + 6.6579046435011037772) /
          (((((((r * 2.04426310338993978564e-15 + 1.4215117583164458887e-7) * r +
                1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r +
              .0148753612908506148525) * r + .13692988092273580531) * r +
            .59983220655588793769) * r + 1.0);
  }
  return q < 0 ? -val : val;
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::domain_error("normal_quantile: p must lie in (0, 1), got " +
                            std::to_string(p));
  }
  return normal_quantile_clamped(p);
}

// ---------------------------------------------------------------------------

namespace {

// Upper bivariate tail P(X > h, Y > k) with correlation r; Genz's BVND.
double bvn_upper(double h, double k, double r) {
  static constexpr std::array<std::array<double, 10>, 3> w = {{
      {0.1713244923791705, 0.3607615730481384, 0.4679139345726904},
      {0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
       0.2031674267230659, 0.2334925365383547, 0.2491470458134029},
      {0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
       0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
       0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
       0.1527533871307259},
  }};
  static constexpr std::array<std::array<double, 10>, 3> x = {{
      {-0.9324695142031522, -0.6612093864662647, -0.2386191860831970},
      {-0.9815606342467191, -0.9041172563704750, -0.7699026741943050,
       -0.5873179542866171, -0.3678314989981802, -0.1252334085114692},
      {-0.9931285991850949, -0.9639719272779138, -0.9122344282513259,
       -0.8391169718222188, -0.7463319064601508, -0.6360536807265150,
       -0.5108670019508271, -0.3737060887154196, -0.2277858511416451,
       -0.07652652113349733},
  }};

  int ng, lg;
  if (std::fabs(r) < 0.3) {
    ng = 0;
    lg = 3;
  } else if (std::fabs(r) < 0.75) {
    ng = 1;
    lg = 6;
  } else {
    ng = 2;
    lg = 10;
  }

  double hk = h * k;
  double bvn = 0.0;
  if (std::fabs(r) < 0.925) {
    const double hs = (h * h + k * k) / 2.0;
    const double asr = std::asin(r);
    for (int i = 0; i < lg; ++i) {
      double sn = std::sin(asr * (x[ng][i] + 1.0) / 2.0);
      bvn += w[ng][i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
      sn = std::sin(asr * (-x[ng][i] + 1.0) / 2.0);
      bvn += w[ng][i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
    }
    return bvn * asr / (2.0 * kTwoPi) + normal_cdf(-h) * normal_cdf(-k);
  }

  if (r < 0) {
    k = -k;
    hk = -hk;
  }
  if (std::fabs(r) < 1.0) {
    const double as = (1.0 - r) * (1.0 + r);
    double a = std::sqrt(as);
    const double bs = (h - k) * (h - k);
    const double c = (4.0 - hk) / 8.0;
    const double d = (12.0 - hk) / 16.0;
    bvn = a * std::exp(-(bs / as + hk) / 2.0) *
          (1.0 - c * (bs - as) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as * as / 5.0);
    if (hk > -160.0) {
      const double b = std::sqrt(bs);
      bvn -= std::exp(-hk / 2.0) * std::sqrt(kTwoPi) * normal_cdf(-b / a) * b *
             (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
    }
    a /= 2.0;
    for (int i = 0; i < lg; ++i) {
      double xs = (a * (x[ng][i] + 1.0)) * (a * (x[ng][i] + 1.0));
      double rs = std::sqrt(1.0 - xs);
      bvn += a * w[ng][i] *
             (std::exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs -
              std::exp(-(bs / xs + hk) / 2.0) * (1.0 + c * xs * (1.0 + d * xs)));
      xs = as * (-x[ng][i] + 1.0) * (-x[ng][i] + 1.0) / 4.0;
      rs = std::sqrt(1.0 - xs);
      bvn += a * w[ng][i] * std::exp(-(bs / xs + hk) / 2.0) *
             (std::exp(-hk * xs / (2.0 * (1.0 + rs) * (1.0 + rs))) / rs -
              (1.0 + c * xs * (1.0 + d * xs)));
    }
    bvn = -bvn / kTwoPi;
  }
  if (r > 0) return bvn + normal_cdf(-std::max(h, k));
  bvn = -bvn;
  if (k > h) {
    bvn += h < 0 ? normal_cdf(k) - normal_cdf(h) : normal_cdf(-h) - normal_cdf(-k);
  }
  return bvn;
}

}  // namespace

double bvn_cdf(double x1, double x2, double rho) {
  if (!(std::fabs(rho) < 1.0)) {
    throw std::domain_error("bvn_cdf: |rho| must be < 1");
  }
  if (std::isnan(x1) || std::isnan(x2)) return std::numeric_limits<double>::quiet_NaN();
  if (x1 == -kInf || x2 == -kInf) return 0.0;
  if (x1 == kInf) return normal_cdf(x2);
  if (x2 == kInf) return normal_cdf(x1);
  if (rho == 0.0) return normal_cdf(x1) * normal_cdf(x2);
  return std::clamp(bvn_upper(-x1, -x2, rho), 0.0, 1.0);
}

double bvn_pdf(double x1, double x2, double rho) {
  if (!(std::fabs(rho) < 1.0)) {
    throw std::domain_error("bvn_pdf: |rho| must be < 1");
  }
  const double om = 1.0 - rho * rho;
  const double q = (x1 * x1 - 2.0 * rho * x1 * x2 + x2 * x2) / om;
  return std::exp(-0.5 * q) / (kTwoPi * std::sqrt(om));
}

// ---------------------------------------------------------------------------

double min_eigenvalue(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(m, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

CorrelationMatrix::CorrelationMatrix(Mat m, double pd_eps) : m_(std::move(m)) {
  const int n = static_cast<int>(m_.rows());
  if (n < 1 || n > 4 || m_.cols() != n) {
    throw MatrixError("correlation matrix must be square with dimension 1..4");
  }
  for (int i = 0; i < n; ++i) {
    if (!(std::fabs(m_(i, i) - 1.0) <= 1e-12)) {
      throw MatrixError("correlation matrix diagonal must be 1");
    }
    m_(i, i) = 1.0;
    for (int j = 0; j < i; ++j) {
      if (!std::isfinite(m_(i, j)) || std::fabs(m_(i, j) - m_(j, i)) > 1e-12) {
        throw MatrixError("correlation matrix must be finite and symmetric");
      }
      if (!(std::fabs(m_(i, j)) < 1.0)) {
        throw MatrixError("correlation entries must lie in (-1, 1)");
      }
      m_(j, i) = m_(i, j);
    }
  }
  if (n > 1 && !(sortsel::min_eigenvalue(m_) > pd_eps)) {
    throw MatrixError("correlation matrix is not positive definite");
  }
}

CorrelationMatrix CorrelationMatrix::identity(int dim) {
  return CorrelationMatrix(Mat::Identity(dim, dim));
}

CorrelationMatrix CorrelationMatrix::equicorrelated(int dim, double rho) {
  Mat m = Mat::Constant(dim, dim, rho);
  m.diagonal().setOnes();
  return CorrelationMatrix(std::move(m));
}

double CorrelationMatrix::min_eigenvalue() const {
  return sortsel::min_eigenvalue(m_);
}

CorrelationMatrix CorrelationMatrix::permuted(const std::vector<int>& perm) const {
  const int n = static_cast<int>(perm.size());
  Mat out(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) out(i, j) = m_(perm[i], perm[j]);
  return CorrelationMatrix(std::move(out), 0.0);
}

PdProjection project_to_pd(const Mat& m, double pd_eps) {
  const int n = static_cast<int>(m.rows());
  Mat sym = 0.5 * (m + m.transpose());
  sym.diagonal().setOnes();
  if (n == 1 || sortsel::min_eigenvalue(sym) > pd_eps) {
    return {CorrelationMatrix(sym, pd_eps), false, 0.0};
  }
  Mat cur = sym;
  double floor = pd_eps;
  for (int iter = 0; iter < 200; ++iter) {
    Eigen::SelfAdjointEigenSolver<Mat> es(cur);
    Vec lambda = es.eigenvalues().cwiseMax(floor);
    Mat clipped = es.eigenvectors() * lambda.asDiagonal() * es.eigenvectors().transpose();
    Vec inv_sd = clipped.diagonal().cwiseSqrt().cwiseInverse();
    cur = inv_sd.asDiagonal() * clipped * inv_sd.asDiagonal();
    cur = 0.5 * (cur + cur.transpose());
    cur.diagonal().setOnes();
    if (sortsel::min_eigenvalue(cur) >= pd_eps * (1.0 + 1e-9)) break;
    floor *= 2.0;
  }
  const double change = (cur - sym).cwiseAbs().maxCoeff();
  return {CorrelationMatrix(cur, 0.0), true, change};
}

// ---------------------------------------------------------------------------

namespace {

double radical_inverse(std::uint64_t i, std::uint64_t base) {
  double inv = 1.0 / static_cast<double>(base);
  double f = inv;
  double out = 0.0;
  while (i > 0) {
    out += f * static_cast<double>(i % base);
    i /= base;
    f *= inv;
  }
  return out;
}

constexpr std::array<std::uint64_t, 8> kPrimes = {2, 3, 5, 7, 11, 13, 17, 19};

struct Reduced {
  Vec b;
  Mat chol;
  bool zero = false;
  bool nan = false;
};

// Drop +inf limits, detect -inf, factorize what remains.
Reduced reduce(const Vec& upper, const Mat& corr) {
  Reduced out;
  std::vector<int> keep;
  for (int k = 0; k < upper.size(); ++k) {
    if (std::isnan(upper(k))) {
      out.nan = true;
      return out;
    }
    if (upper(k) == -kInf) out.zero = true;
    if (upper(k) != kInf) keep.push_back(k);
  }
  if (out.zero) return out;
  const int n = static_cast<int>(keep.size());
  out.b.resize(n);
  Mat sub(n, n);
  for (int i = 0; i < n; ++i) {
    out.b(i) = upper(keep[i]);
    for (int j = 0; j < n; ++j) sub(i, j) = corr(keep[i], keep[j]);
  }
  if (n > 0) {
    Eigen::LLT<Mat> llt(sub);
    if (llt.info() != Eigen::Success) {
      throw MatrixError("GHK: Cholesky factorization failed");
    }
    out.chol = llt.matrixL();
  }
  return out;
}

// Per-draw GHK importance weights for lower limits -inf, upper limits b.
void ghk_weights(const Vec& b, const Mat& chol, const UniformPointSet& pts, Vec& w) {
  const int n = static_cast<int>(b.size());
  const int draws = pts.draws();
  w.resize(draws);
  if (n == 0) {
    w.setOnes();
    return;
  }
  if (n == 1) {
    w.setConstant(normal_cdf(b(0)));
    return;
  }
  if (pts.dims() < n - 1) throw std::invalid_argument("GHK: point set has too few dimensions");
  std::array<double, 4> e{};
  for (int r = 0; r < draws; ++r) {
    double weight = 1.0;
    for (int k = 0; k < n; ++k) {
      double mu = 0.0;
      for (int j = 0; j < k; ++j) mu += chol(k, j) * e[j];
      const double t = normal_cdf((b(k) - mu) / chol(k, k));
      weight *= t;
      if (weight <= 0.0) break;
      if (k + 1 < n) e[k] = normal_quantile_clamped(pts(r, k) * t);
    }
    w(r) = weight;
  }
}

GhkResult summarize(const Vec& w) {
  const double n = static_cast<double>(w.size());
  const double mean = w.mean();
  if (w.size() < 2) return {mean, 0.0};
  const double var = (w.array() - mean).square().sum() / (n - 1.0);
  return {mean, std::sqrt(var / n)};
}

}  // namespace

UniformPointSet::UniformPointSet(int draws, int dims, std::uint64_t seed,
                                 DrawSequence sequence)
    : u_(draws, dims) {
  if (draws < 1 || dims < 0 || dims > static_cast<int>(kPrimes.size())) {
    throw std::invalid_argument("UniformPointSet: bad size");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  constexpr double lo = 1e-12;
  if (sequence == DrawSequence::halton) {
    Vec shift(dims);
    for (int d = 0; d < dims; ++d) shift(d) = unif(rng);
    for (int r = 0; r < draws; ++r) {
      for (int d = 0; d < dims; ++d) {
        double v = radical_inverse(static_cast<std::uint64_t>(r) + 1, kPrimes[d]) + shift(d);
        v -= std::floor(v);
        u_(r, d) = std::clamp(v, lo, 1.0 - lo);
      }
    }
  } else {
    for (int r = 0; r < draws; ++r)
      for (int d = 0; d < dims; ++d) u_(r, d) = std::clamp(unif(rng), lo, 1.0 - lo);
  }
}

GhkResult mvn_cdf_ghk(const Vec& upper, const CorrelationMatrix& corr,
                      const UniformPointSet& points) {
  if (upper.size() != corr.dim()) {
    throw std::invalid_argument("mvn_cdf_ghk: limit length differs from dimension");
  }
  Reduced red = reduce(upper, corr.matrix());
  if (red.nan) return {std::numeric_limits<double>::quiet_NaN(), 0.0};
  if (red.zero) return {0.0, 0.0};
  if (red.b.size() <= 1) return {red.b.size() == 0 ? 1.0 : normal_cdf(red.b(0)), 0.0};
  Vec w;
  ghk_weights(red.b, red.chol, points, w);
  return summarize(w);
}

GhkResult mvn_cdf_ghk(const Vec& upper, const CorrelationMatrix& corr,
                      const GhkOptions& opts) {
  if (opts.draws < 1) throw std::invalid_argument("mvn_cdf_ghk: draws must be positive");
  UniformPointSet pts(opts.draws, std::max(corr.dim() - 1, 1), opts.seed, opts.sequence);
  return mvn_cdf_ghk(upper, corr, pts);
}

GhkResult mvn_rectangle(const Vec& lower, const Vec& upper, const CorrelationMatrix& corr,
                        const GhkOptions& opts) {
  const int n = corr.dim();
  if (lower.size() != n || upper.size() != n) {
    throw std::invalid_argument("mvn_rectangle: limit length differs from dimension");
  }
  for (int k = 0; k < n; ++k) {
    if (!(lower(k) <= upper(k))) throw std::invalid_argument("mvn_rectangle: lower > upper");
    if (lower(k) == upper(k)) return {0.0, 0.0};
  }
  UniformPointSet pts(opts.draws, std::max(n - 1, 1), opts.seed, opts.sequence);
  Vec total = Vec::Zero(opts.draws);
  Vec w;
  Vec corner(n);
  for (int mask = 0; mask < (1 << n); ++mask) {
    int sign = 1;
    bool skip = false;
    for (int k = 0; k < n; ++k) {
      if (mask & (1 << k)) {
        if (lower(k) == -kInf) skip = true;
        corner(k) = lower(k);
        sign = -sign;
      } else {
        corner(k) = upper(k);
      }
    }
    if (skip) continue;
    Reduced red = reduce(corner, corr.matrix());
    if (red.zero) continue;
    ghk_weights(red.b, red.chol, pts, w);
    total += static_cast<double>(sign) * w;
  }
  GhkResult res = summarize(total);
  res.prob = std::max(res.prob, 0.0);
  return res;
}

ConditionalBlock conditional_block(const CorrelationMatrix& corr, int i, int j) {
  const int n = corr.dim();
  std::vector<int> rest;
  for (int k = 0; k < n; ++k)
    if (k != i && k != j) rest.push_back(k);
  const int m = static_cast<int>(rest.size());
  Mat s33(m, m);
  Vec s13(m), s23(m);
  for (int a = 0; a < m; ++a) {
    s13(a) = corr(i, rest[a]);
    s23(a) = corr(j, rest[a]);
    for (int b = 0; b < m; ++b) s33(a, b) = corr(rest[a], rest[b]);
  }
  ConditionalBlock blk;
  if (m == 0) {
    blk.rho_12 = corr(i, j);
    return blk;
  }
  Eigen::LLT<Mat> llt(s33);
  blk.coef_1 = llt.solve(s13);
  blk.coef_2 = llt.solve(s23);
  blk.sigma_1 = std::sqrt(1.0 - s13.dot(blk.coef_1));
  blk.sigma_2 = std::sqrt(1.0 - s23.dot(blk.coef_2));
  blk.rho_12 = (corr(i, j) - s13.dot(blk.coef_2)) / (blk.sigma_1 * blk.sigma_2);
  return blk;
}

GhkResult mvn_cdf_drho(const Vec& x, const CorrelationMatrix& corr, int i, int j,
                       const GhkOptions& opts) {
  const int n = corr.dim();
  if (x.size() != n) throw std::invalid_argument("mvn_cdf_drho: limit length differs from dimension");
  if (i < 0 || j < 0 || i >= n || j >= n || i == j) {
    throw std::domain_error("mvn_cdf_drho: index out of range or i == j");
  }
  if (!std::isfinite(x(i)) || !std::isfinite(x(j))) {
    throw std::domain_error("mvn_cdf_drho: limits of the differentiated pair must be finite");
  }
  // Marginalize +inf coordinates, short-circuit -inf.
  std::vector<int> keep{i, j};
  for (int k = 0; k < n; ++k) {
    if (k == i || k == j) continue;
    if (x(k) == -kInf) return {0.0, 0.0};
    if (x(k) != kInf) keep.push_back(k);
  }
  const CorrelationMatrix sub = corr.permuted(keep);
  const int m = sub.dim() - 2;
  if (m == 0) return {bvn_pdf(x(i), x(j), sub(0, 1)), 0.0};

  const ConditionalBlock blk = conditional_block(sub, 0, 1);
  Mat s33(m, m);
  Vec x3(m);
  for (int a = 0; a < m; ++a) {
    x3(a) = x(keep[a + 2]);
    for (int b = 0; b < m; ++b) s33(a, b) = sub(a + 2, b + 2);
  }
  Eigen::LLT<Mat> llt(s33);
  if (llt.info() != Eigen::Success) throw MatrixError("mvn_cdf_drho: Cholesky failed");
  const Mat l3 = llt.matrixL();

  UniformPointSet pts(opts.draws, m, opts.seed, opts.sequence);
  Vec w(opts.draws);
  Vec e(m), x3_draw(m);
  const double scale = 1.0 / (blk.sigma_1 * blk.sigma_2);
  for (int r = 0; r < opts.draws; ++r) {
    double weight = 1.0;
    for (int k = 0; k < m; ++k) {
      double mu = 0.0;
      for (int l = 0; l < k; ++l) mu += l3(k, l) * e(l);
      const double t = normal_cdf((x3(k) - mu) / l3(k, k));
      weight *= t;
      e(k) = normal_quantile_clamped(pts(r, k) * t);
    }
    if (weight <= 0.0) {
      w(r) = 0.0;
      continue;
    }
    x3_draw = l3 * e;
    const double z1 = (x(i) - blk.coef_1.dot(x3_draw)) / blk.sigma_1;
    const double z2 = (x(j) - blk.coef_2.dot(x3_draw)) / blk.sigma_2;
    w(r) = weight * bvn_pdf(z1, z2, blk.rho_12) * scale;
  }
  return summarize(w);
}

}  // namespace sortsel
