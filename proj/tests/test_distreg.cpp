#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "sortsel/distreg.hpp"
#include "test_support.hpp"

using namespace sortsel;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double bisect(const std::function<double(double)>& f, double lo, double hi) {
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    ((f(mid) > 0.0) == (f(hi) > 0.0) ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

double bvn_quadrature(double x1, double x2, double rho) {
  const double s = std::sqrt(1.0 - rho * rho);
  auto f = [&](double t) {
    return std::exp(-0.5 * t * t) / std::sqrt(2.0 * std::numbers::pi) *
           static_cast<double>(sortsel::testing::erf_cdf((x2 - rho * t) / s));
  };
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, -kInf, x1, 20, 1e-14);
}

Mat with_intercept(const Vec& x) {
  Mat m(x.size(), 2);
  m.col(0).setOnes();
  m.col(1) = x;
  return m;
}

Vec normals(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = n01(rng);
  return v;
}

struct BivariateDraw {
  Vec e1, e2;
};

BivariateDraw correlated(int n, double rho, std::mt19937_64& rng) {
  const Vec a = normals(n, rng), b = normals(n, rng);
  return {a, rho * a + std::sqrt(1.0 - rho * rho) * b};
}

}  // namespace

TEST_CASE("probit intercept-only closed forms") {
  SUBCASE("half ones gives zero") {
    Vec y(1000);
    for (int i = 0; i < 1000; ++i) y(i) = i % 2;
    const ProbitFit f = probit_fit(y, Mat::Ones(1000, 1));
    CHECK(f.converged);
    CHECK(std::fabs(f.coef(0)) <= 1e-8);
  }
  SUBCASE("share 0.841345 gives the normal quantile") {
    const int n = 1000000, ones = 841345;
    Vec y = Vec::Zero(n);
    y.head(ones).setOnes();
    const ProbitFit f = probit_fit(y, Mat::Ones(n, 1));
    const double target = bisect(
        [](double b) { return static_cast<double>(sortsel::testing::erf_cdf(b)) - 0.841345; },
        0.0, 3.0);
    CHECK(f.converged);
    CHECK(f.coef(0) == doctest::Approx(target).epsilon(1e-6));
    CHECK(std::fabs(f.coef(0) - 1.0) <= 1e-5);
  }
}

TEST_CASE("probit recovers known coefficients") {
  std::mt19937_64 rng(11);
  const int n = 20000;
  const Vec x = normals(n, rng), u = normals(n, rng);
  const Vec y = ((0.5 - 1.0 * x.array()) >= u.array()).cast<double>();
  const ProbitFit f = probit_fit(y, with_intercept(x));
  REQUIRE(f.converged);
  const Vec se = f.se();
  CHECK(std::fabs(f.coef(0) - 0.5) <= 3 * se(0));
  CHECK(std::fabs(f.coef(1) + 1.0) <= 3 * se(1));

  SUBCASE("rescaling a covariate rescales its coefficient") {
    const ProbitFit g = probit_fit(y, with_intercept(4.0 * x));
    CHECK(g.coef(1) * 4.0 == doctest::Approx(f.coef(1)).epsilon(1e-8));
    CHECK(g.coef(0) == doctest::Approx(f.coef(0)).epsilon(1e-8));
    CHECK(std::fabs(g.loglik - f.loglik) <= 1e-8 * std::fabs(f.loglik));
  }
}

TEST_CASE("probit rejects degenerate designs") {
  const int n = 200;
  Vec y(n), x(n);
  for (int i = 0; i < n; ++i) {
    y(i) = (i * 7) % 3 == 0;
    x(i) = std::sin(i);
  }
  SUBCASE("constant outcome") {
    CHECK_THROWS_AS(probit_fit(Vec::Ones(n), with_intercept(x)), EstimationError);
  }
  SUBCASE("collinear column is named") {
    Mat d(n, 3);
    d << Vec::Ones(n), x, 2.0 * x;
    try {
      probit_fit(y, d, Vec(), {"const", "age", "age_twice"});
      FAIL("expected EstimationError");
    } catch (const EstimationError& e) {
      CHECK(std::string(e.what()).find("age_twice") != std::string::npos);
    }
  }
  SUBCASE("separating dummy is dropped with a named warning") {
    Mat d(n, 3);
    Vec dummy(n), yy = y;
    for (int i = 0; i < n; ++i) {
      dummy(i) = i < 40;
      if (i < 40) yy(i) = 1.0;
    }
    d << Vec::Ones(n), x, dummy;
    const ProbitFit f = probit_fit(yy, d, Vec(), {"const", "x", "kids"});
    REQUIRE(f.dropped.size() == 1);
    CHECK(f.dropped[0] == 2);
    CHECK(f.coef(2) == 0.0);
    REQUIRE(!f.warnings.empty());
    CHECK(f.warnings[0].find("kids") != std::string::npos);
  }
}

TEST_CASE("biprobit") {
  std::mt19937_64 rng(5);
  const int n = 50000;
  const Vec z = normals(n, rng);
  const Mat design = with_intercept(z);

  SUBCASE("independence: rho near zero and fixed-zero fit equals marginal probits") {
    const BivariateDraw e = correlated(n, 0.0, rng);
    const Vec dw = ((0.3 + 0.8 * z.array()) >= e.e1.array()).cast<double>();
    const Vec dh = ((1.0 - 0.5 * z.array()) >= e.e2.array()).cast<double>();
    const BiprobitFit f = biprobit_fit(dw, dh, design);
    CHECK(f.converged);
    CHECK(std::fabs(f.rho) <= 3 * f.rho_se);
    const BiprobitFit f0 = biprobit_fit(dw, dh, design, Vec(), 0.0);
    const ProbitFit mw = probit_fit(dw, design), mh = probit_fit(dh, design);
    CHECK((f0.gamma_w - mw.coef).cwiseAbs().maxCoeff() <= 1e-4);
    CHECK((f0.gamma_h - mh.coef).cwiseAbs().maxCoeff() <= 1e-4);
    CHECK(f.loglik >= f0.loglik - 1e-6);
  }
  SUBCASE("recovery at rho 0.3") {
    const BivariateDraw e = correlated(n, 0.3, rng);
    const Vec dw = ((0.3 + 0.8 * z.array()) >= e.e1.array()).cast<double>();
    const Vec dh = ((1.0 - 0.5 * z.array()) >= e.e2.array()).cast<double>();
    const BiprobitFit f = biprobit_fit(dw, dh, design);
    REQUIRE(f.converged);
    const Vec se = f.vcov.diagonal().cwiseSqrt();
    CHECK(std::fabs(f.gamma_w(0) - 0.3) <= 3 * se(0));
    CHECK(std::fabs(f.gamma_w(1) - 0.8) <= 3 * se(1));
    CHECK(std::fabs(f.gamma_h(0) - 1.0) <= 3 * se(2));
    CHECK(std::fabs(f.gamma_h(1) + 0.5) <= 3 * se(3));
    CHECK(std::fabs(f.rho - 0.3) <= 3 * f.rho_se);
  }
}

TEST_CASE("biprobit saturated 2x2 matches the one-dimensional root") {
  const int n = 10000;
  Vec dw(n), dh(n);
  for (int i = 0; i < n; ++i) {
    if (i < 4200) { dw(i) = 1; dh(i) = 1; }
    else if (i < 6000) { dw(i) = 1; dh(i) = 0; }
    else if (i < 7800) { dw(i) = 0; dh(i) = 1; }
    else { dw(i) = 0; dh(i) = 0; }
  }
  const BiprobitFit f = biprobit_fit(dw, dh, Mat::Ones(n, 1));
  const double q = bisect(
      [](double b) { return static_cast<double>(sortsel::testing::erf_cdf(b)) - 0.6; }, -2, 2);
  const double rho = bisect([&](double r) { return bvn_quadrature(q, q, r) - 0.42; }, -0.99, 0.99);
  CHECK(f.gamma_w(0) == doctest::Approx(q).epsilon(1e-6));
  CHECK(f.gamma_h(0) == doctest::Approx(q).epsilon(1e-6));
  CHECK(f.rho == doctest::Approx(rho).epsilon(1e-6));

  dh.setZero();
  dh(0) = 1;
  dh(7000) = 1;
  dw.head(6000).setOnes();
  CHECK_THROWS_AS(biprobit_fit(dw, dh.cwiseProduct(dw), Mat::Ones(n, 1)), EstimationError);
}

TEST_CASE("empirical quantiles and grids") {
  Vec y(5);
  y << 3, 1, 4, 1, 5;
  CHECK(empirical_quantile(y, 0.2) == 1);
  CHECK(empirical_quantile(y, 0.4) == 1);
  CHECK(empirical_quantile(y, 0.41) == 3);
  CHECK(empirical_quantile(y, 1.0) == 5);
  Vec w(5);
  w << 1, 1, 1, 1, 6;
  CHECK(empirical_quantile(y, 0.5, w) == 5);

  std::mt19937_64 rng(1);
  const Vec a = normals(1000, rng), b = normals(1000, rng);
  const ThresholdGrid g = make_grid(a, b, 10);
  CHECK(g.levels.size() == 9);
  for (int k = 1; k < 9; ++k) {
    CHECK(g.cuts_w(k) > g.cuts_w(k - 1));
    CHECK(g.cuts_h(k) > g.cuts_h(k - 1));
  }
  CHECK(std::isinf(g.cut_w(9)));
  CHECK_THROWS_AS(make_grid(Vec::Ones(100), b.head(100), 10), EstimationError);
}

TEST_CASE("univariate distribution regression") {
  std::mt19937_64 rng(21);
  const int n = 20000;
  const Vec x = normals(n, rng), e = normals(n, rng);
  const Vec y = x + e;
  const Mat design = with_intercept(x);

  SUBCASE("median cutoff, intercept only") {
    Vec cut(1);
    cut << empirical_quantile(y, 0.5);
    const UdrFit f = udr_fit(y, Mat::Ones(n, 1), cut);
    CHECK(std::fabs(f.fits[0].coef(0)) <= 1e-8);
  }
  SUBCASE("location model coefficients at each decile") {
    const ThresholdGrid g = make_grid(y, y, 10);
    const UdrFit f = udr_fit(y, design, g.cuts_w);
    REQUIRE(f.skipped.empty());
    for (int k = 0; k < 9; ++k) {
      const Vec se = f.fits[k].se();
      CHECK(std::fabs(f.fits[k].coef(0) - g.cuts_w(k)) <= 3 * se(0));
      CHECK(std::fabs(f.fits[k].coef(1) + 1.0) <= 3 * se(1));
    }
    const Mat cdf = udr_fitted_cdf(f, design);
    for (Eigen::Index i = 0; i < cdf.rows(); ++i) {
      for (int k = 1; k < 9; ++k) CHECK_LE(cdf(i, k - 1), cdf(i, k));
    }
  }
  SUBCASE("saturated design reproduces in-sample levels") {
    Mat sat(n, 3);
    for (int i = 0; i < n; ++i) sat.row(i) << 1.0, x(i) > -0.5, x(i) > 0.5;
    const ThresholdGrid g = make_grid(y, y, 10);
    const UdrFit f = udr_fit(y, sat, g.cuts_w);
    const Mat cdf = udr_fitted_cdf(f, sat);
    for (int k = 0; k < 9; ++k) CHECK(std::fabs(cdf.col(k).mean() - g.levels(k)) <= 1e-6);
  }
  SUBCASE("degenerate cutoff is skipped and interpolated") {
    Vec cuts(3);
    cuts << -100.0, 0.0, 1.0;
    const UdrFit f = udr_fit(y, design, cuts);
    CHECK(f.skipped == std::vector<int>{0});
    CHECK(!f.warnings.empty());
    const Mat cdf = udr_fitted_cdf(f, design);
    CHECK(cdf.col(0).isApprox(cdf.col(1)));
  }
}

TEST_CASE("bivariate distribution regression correlation") {
  std::mt19937_64 rng(8);
  const int n = 50000;
  const Vec x = normals(n, rng);

  SUBCASE("constant local correlation 0.2") {
    const BivariateDraw e = correlated(n, 0.2, rng);
    const Vec mw = (0.2 - 0.5 * x.array()).matrix(), mh = (-0.4 + 0.7 * x.array()).matrix();
    const Vec iw = (e.e1.array() <= mw.array()).cast<double>();
    const Vec ih = (e.e2.array() <= mh.array()).cast<double>();
    const RhoFit f = bdr_rho_fit(iw, ih, mw, mh);
    CHECK(f.converged);
    CHECK(!f.boundary);
    CHECK(std::fabs(f.rho - 0.2) <= 0.02);
    CHECK(std::fabs(f.rho - 0.2) <= 3 * f.se);

    // Single sign change of the numerical derivative in atanh(rho).
    int changes = 0;
    double prev = 0.0;
    for (int k = 0; k <= 40; ++k) {
      const double t = -2.0 + 4.0 * k / 40.0, h = 1e-3;
      const double d = (bdr_loglik(iw, ih, mw, mh, std::tanh(t + h)) -
                        bdr_loglik(iw, ih, mw, mh, std::tanh(t - h))) / (2 * h);
      if (k > 0 && (d > 0) != (prev > 0)) ++changes;
      prev = d;
    }
    CHECK(changes == 1);
  }
  SUBCASE("independent indicators across replications") {
    for (int rep = 0; rep < 8; ++rep) {
      const Vec u1 = normals(5000, rng), u2 = normals(5000, rng);
      const Vec mw = x.head(5000) * 0.3, mh = Vec::Constant(5000, 0.4);
      const Vec iw = (u1.array() <= mw.array()).cast<double>();
      const Vec ih = (u2.array() <= mh.array()).cast<double>();
      const RhoFit f = bdr_rho_fit(iw, ih, mw, mh);
      CHECK(std::fabs(f.rho) <= 3 * f.se);
    }
  }
  SUBCASE("grid fit on a bivariate normal") {
    const BivariateDraw e = correlated(20000, 0.5, rng);
    const Vec xs = x.head(20000);
    const Vec yw = xs + e.e1, yh = -0.5 * xs + e.e2;
    const ThresholdGrid g = make_grid(yw, yh, 5);
    const Mat d = with_intercept(xs);
    const BdrFit f = bdr_fit(yw, yh, d, d, g);
    CHECK(f.rho.rows() == 4);
    CHECK(std::fabs(f.rho.mean() - 0.5) <= 0.03);
    for (int k = 0; k < 4; ++k)
      for (int l = 0; l < 4; ++l) CHECK(std::fabs(f.rho(k, l) - 0.5) <= 4 * f.rho_se(k, l));
  }
}
