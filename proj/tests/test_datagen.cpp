#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "sortsel/datagen.hpp"
#include "sortsel/model.hpp"

using namespace sortsel;

namespace {

double phi_ref(double x) { return boost::math::cdf(boost::math::normal(), x); }
double pdf_ref(double x) { return boost::math::pdf(boost::math::normal(), x); }

// Participation index z'gamma for every covariate configuration.
struct IndexLaw {
  Vec a, b, probs;
};

IndexLaw index_law(const DgpSpec& s) {
  const CovariateLaw law = covariate_law(s);
  return {law.rows * s.gamma_w, law.rows * s.gamma_h, law.probs};
}

double ks_statistic(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = phi_ref(v[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  return d;
}

}  // namespace

TEST_CASE("simulate: participation frequencies") {
  SUBCASE("independent errors") {
    DgpSpec s = acceptance_dgp(400000, 11);
    s.rho.fill(0.0);
    const SimulatedSample sim = simulate(s);
    const IndexLaw law = index_law(s);
    double expect = 0.0;
    for (Eigen::Index r = 0; r < law.probs.size(); ++r)
      expect += law.probs(r) * phi_ref(law.a(r)) * phi_ref(law.b(r));
    const double got = sim.data.d_w.cwiseProduct(sim.data.d_h).mean();
    const double se = std::sqrt(expect * (1 - expect) / s.n);
    CHECK(std::fabs(got - expect) <= 3 * se);
  }

  SUBCASE("correlated participation, all four cells") {
    DgpSpec s = acceptance_dgp(1000000, 12);
    s.rho.fill(0.0);
    s[Rho::dwdh] = 0.3;
    const SimulatedSample sim = simulate(s);
    const IndexLaw law = index_law(s);
    double p11 = 0, pw = 0, ph = 0;
    for (Eigen::Index r = 0; r < law.probs.size(); ++r) {
      p11 += law.probs(r) * bvn_cdf(law.a(r), law.b(r), 0.3);
      pw += law.probs(r) * phi_ref(law.a(r));
      ph += law.probs(r) * phi_ref(law.b(r));
    }
    const double expect[4] = {1 - pw - ph + p11, ph - p11, pw - p11, p11};  // (d_w, d_h) 00 01 10 11
    double count[4] = {0, 0, 0, 0};
    for (int i = 0; i < s.n; ++i)
      count[2 * static_cast<int>(sim.data.d_w(i)) + static_cast<int>(sim.data.d_h(i))] += 1;
    for (int c = 0; c < 4; ++c) {
      CAPTURE(c);
      const double got = count[c] / s.n;
      CHECK(std::fabs(got - expect[c]) <= 3 * std::sqrt(expect[c] * (1 - expect[c]) / s.n));
    }
  }
}

TEST_CASE("simulate: observation rule and latent marginals") {
  const DgpSpec s = acceptance_dgp(200000, 13);
  const SimulatedSample sim = simulate(s);
  const HouseholdData& d = sim.data;
  CHECK_NOTHROW(d.validate());
  std::vector<double> std_w, std_h;
  for (int i = 0; i < d.size(); ++i) {
    const bool both = d.d_w(i) == 1.0 && d.d_h(i) == 1.0;
    REQUIRE(std::isnan(d.y_w(i)) == !both);
    REQUIRE(std::isnan(d.y_h(i)) == !both);
    if (both) REQUIRE(d.y_w(i) == sim.latent.y_w(i));
    const double x = d.x(i, 0);
    std_w.push_back((std::log(sim.latent.y_w(i)) - s.wage_w.coef(0) - s.wage_w.coef(1) * x) /
                    s.wage_w.scale);
    std_h.push_back((std::log(sim.latent.y_h(i)) - s.wage_h.coef(0) - s.wage_h.coef(1) * x) /
                    s.wage_h.scale);
  }
  // 1% critical value of the one-sample KS statistic.
  const double crit = 1.628 / std::sqrt(static_cast<double>(s.n));
  CHECK(ks_statistic(std_w) < crit);
  CHECK(ks_statistic(std_h) < crit);

  const SimulatedSample again = simulate(s);
  CHECK(again.latent.y_w == sim.latent.y_w);
  CHECK(again.data.d_h == d.d_h);
}

TEST_CASE("simulate: selection shifts the observed wage mean by the truncated-normal amount") {
  const DgpSpec s = acceptance_dgp(600000, 14);
  const SimulatedSample sim = simulate(s);
  const HouseholdData& d = sim.data;
  // One covariate cell: educ = 1, kids = 0, young_child = 0.
  const double a = s.gamma_w(0) + s.gamma_w(1);
  const double b = s.gamma_h(0) + s.gamma_h(1);
  const double r = s[Rho::dwdh];
  const double root = std::sqrt(1 - r * r);
  const double joint = bvn_cdf(a, b, r);
  auto conditional_mean = [&](double rho_own, double rho_cross) {
    return -(rho_own * pdf_ref(a) * phi_ref((b - r * a) / root) +
             rho_cross * pdf_ref(b) * phi_ref((a - r * b) / root)) /
           joint;
  };
  // Wife's error loads on u_Dw through dwyw and on u_Dh through dhyw.
  const double shift_w = conditional_mean(s[Rho::dwyw], s[Rho::dhyw]);
  const double shift_h = conditional_mean(s[Rho::dwyh], s[Rho::dhyh]);
  CHECK(shift_w > 0.0);  // negative internal correlation: high earners participate

  double sw = 0, sw2 = 0, sh = 0, sh2 = 0;
  int m = 0;
  for (int i = 0; i < d.size(); ++i) {
    if (!d.works(i) || d.x(i, 0) != 1.0 || d.z_only(i, 0) != 0.0 || d.z_only(i, 1) != 0.0) continue;
    const double ew = (std::log(d.y_w(i)) - s.wage_w.coef(0) - s.wage_w.coef(1)) / s.wage_w.scale;
    const double eh = (std::log(d.y_h(i)) - s.wage_h.coef(0) - s.wage_h.coef(1)) / s.wage_h.scale;
    sw += ew;
    sw2 += ew * ew;
    sh += eh;
    sh2 += eh * eh;
    ++m;
  }
  REQUIRE(m > 50000);
  const double mw = sw / m, mh = sh / m;
  const double se_w = std::sqrt((sw2 / m - mw * mw) / m);
  const double se_h = std::sqrt((sh2 / m - mh * mh) / m);
  CHECK(std::fabs(mw - shift_w) <= 3 * se_w);
  CHECK(std::fabs(mh - shift_h) <= 3 * se_h);
  CHECK(mw > 0.0);
}

TEST_CASE("mc_orthant reference values") {
  const McEstimate indep = mc_orthant(Vec::Zero(4), CorrelationMatrix::identity(4), 400000, 1);
  CHECK(std::fabs(indep.prob - 0.0625) <= 3 * indep.std_error);

  Mat m(2, 2);
  m << 1.0, -0.4, -0.4, 1.0;
  const CorrelationMatrix c2(m);
  Vec x(2);
  x << 0.3, -0.7;
  const McEstimate two = mc_orthant(x, c2, 400000, 2);
  CHECK(std::fabs(two.prob - bvn_cdf(0.3, -0.7, -0.4)) <= 3 * two.std_error);

  const McEstimate como =
      mc_orthant(Vec::Zero(3), CorrelationMatrix::equicorrelated(3, 0.999), 200000, 3);
  CHECK(como.prob == doctest::Approx(0.5).epsilon(0.02));

  CHECK_THROWS_AS(mc_orthant(Vec::Zero(2), c2, 9999, 0), std::invalid_argument);
  CHECK_THROWS_AS(mc_orthant(Vec::Zero(3), c2, 10000, 0), std::invalid_argument);
}

TEST_CASE("standard_normal inversion") {
  CHECK(std::fabs(standard_normal(std::uint64_t{1} << 63)) < 1e-15);
  CHECK(standard_normal(0) < -7.5);
  CHECK(standard_normal(~std::uint64_t{0}) > 7.5);
}

TEST_CASE("dgp validation") {
  const DgpSpec good = acceptance_dgp(10, 0);
  CHECK_NOTHROW(validate(good));
  CHECK(excluded_relevant(good));

  DgpSpec s = good;
  s.gamma_w.conservativeResize(3);
  CHECK_THROWS_AS(validate(s), std::invalid_argument);

  s = good;
  s.covariates[0].probs = {0.5, 0.4, 0.3};
  CHECK_THROWS_AS(validate(s), std::invalid_argument);

  s = good;
  s[Rho::ywyh] = 1.0;
  CHECK_THROWS_AS(validate(s), std::invalid_argument);

  s = good;
  s[Rho::dwyw] = 0.9;
  s[Rho::dhyw] = 0.9;
  s[Rho::dwdh] = -0.9;
  CHECK_THROWS_AS(validate(s), std::invalid_argument);
  CHECK_THROWS_AS(simulate(s), std::invalid_argument);

  s = good;
  s.gamma_w(2) = s.gamma_h(2) = 0.0;
  CHECK(!excluded_relevant(s));
}

TEST_CASE("true parameters follow the location model") {
  const DgpSpec s = acceptance_dgp(10, 0);
  const double y = 12.0;
  Vec row(2);
  row << 1.0, 2.0;
  const double direct = phi_ref((std::log(y) - 2.3 - 0.25 * 2.0) / 0.5);
  CHECK(true_wage_cdf(s.wage_w, row, y) == doctest::Approx(direct).epsilon(1e-12));
  const LocalParams p = true_params(s, y, std::numeric_limits<double>::infinity());
  CHECK(p.beta_h.isZero());
  CHECK(p[Rho::ywyh] == 0.25);

  const CovariateLaw law = covariate_law(s);
  CHECK(law.rows.rows() == 12);
  CHECK(law.probs.sum() == doctest::Approx(1.0));
}

TEST_CASE("preset periods: fitted wage correlation tracks the preset" * doctest::timeout(300)) {
  const std::vector<DgpSpec> periods = cps_like_periods(60000, 5);
  REQUIRE(periods.size() == 2);
  CHECK(periods[0][Rho::ywyh] == 0.18);
  CHECK(periods[1][Rho::ywyh] == 0.24);
  CHECK(periods[0][Rho::dwyw] == -0.3);
  CHECK(periods[1][Rho::dwyw] == 0.2);
  for (const DgpSpec& p : periods) {
    const SimulatedSample sim = simulate(p);
    const SelectionSample sample(sim.data, {});
    const ThresholdGrid grid = selected_grid(sample, 3);
    const ModelGridFit fit = fit_grid(sample, grid, {});
    double sum = 0;
    int used = 0;
    for (int k = 0; k < 2; ++k)
      for (int l = 0; l < 2; ++l)
        if (fit.cell(k, l).usable()) {
          sum += fit.cell(k, l).params[Rho::ywyh];
          ++used;
        }
    REQUIRE(used > 0);
    CAPTURE(p.period);
    CHECK(std::fabs(sum / used - p[Rho::ywyh]) < 0.05);
  }
}
