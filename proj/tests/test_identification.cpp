#include <doctest.h>

#include <cmath>

#include "sortsel/identification.hpp"

using namespace sortsel;

namespace {

double max_rho_error(const IdentificationReport& r, const DgpSpec& s) {
  double e = 0.0;
  for (Rho q : kAllRhos) e = std::max(e, std::fabs(r[q] - s[q]));
  return e;
}

}  // namespace

TEST_CASE("identification replay recovers the acceptance correlations") {
  const DgpSpec s = identification_dgp(1000000, 21);
  const IdentificationReport r = identification_check(s, s.n);
  CHECK(!r.flat);
  CHECK(r.notes.empty());
  // Sampling sd of each recovered quantity is about 0.004 at this n.
  CHECK(max_rho_error(r, s) < 0.02);
  CHECK((r.mu_dw - r.true_mu_dw).cwiseAbs().maxCoeff() < 0.02);
  CHECK((r.mu_yw - r.true_mu_yw).cwiseAbs().maxCoeff() < 0.02);
  CHECK((r.mu_yh - r.true_mu_yh).cwiseAbs().maxCoeff() < 0.02);
  CHECK(r.max_error < 0.02);

  SUBCASE("each scanned residual crosses zero once and increases") {
    REQUIRE(r.scans.size() == 3);
    for (const RhoScan& sc : r.scans) {
      CAPTURE(rho_name(sc.rho));
      CHECK(sc.grid.size() == 41);
      CHECK(sc.sign_changes == 1);
      double prev = -1e300;
      for (Eigen::Index k = 0; k < sc.residual.size(); ++k) {
        if (!std::isfinite(sc.residual(k))) continue;
        CHECK(sc.residual(k) > prev);
        prev = sc.residual(k);
      }
    }
  }
}

TEST_CASE("identification replay: cross correlation from the trivariate root") {
  DgpSpec s = identification_dgp(1000000, 22);
  s[Rho::dwyh] = -0.15;
  const IdentificationReport r = identification_check(s, s.n);
  CHECK(std::fabs(r[Rho::dwyh] + 0.15) < 0.02);
  CHECK(std::fabs(r.step2_dwyh + 0.15) < 0.02);
}

TEST_CASE("identification replay: independent errors") {
  DgpSpec s = identification_dgp(1000000, 23);
  s.rho.fill(0.0);
  const IdentificationReport r = identification_check(s, s.n);
  for (Rho q : kAllRhos) {
    CAPTURE(rho_name(q));
    CHECK(std::fabs(r[q]) < 0.02);
  }
}

TEST_CASE("identification replay: irrelevant exclusions read as a flat objective") {
  DgpSpec s = acceptance_dgp(300000, 24);
  s.gamma_w.tail(2).setZero();
  s.gamma_h.tail(2).setZero();
  REQUIRE(!excluded_relevant(s));
  IdentificationReport r;
  CHECK_NOTHROW(r = identification_check(s, s.n));
  CHECK(r.flat);
  CHECK(!r.notes.empty());

  const IdentificationReport ok = identification_check(acceptance_dgp(300000, 24), 300000);
  CHECK(!ok.flat);
  CHECK(ok.conditioning > 10 * r.conditioning);
}
