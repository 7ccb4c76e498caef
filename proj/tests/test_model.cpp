#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <limits>

#include "sortsel/datagen.hpp"
#include "sortsel/model.hpp"

using namespace sortsel;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

DgpSpec no_selection_dgp(int n, std::uint64_t seed) {
  DgpSpec s = acceptance_dgp(n, seed);
  s[Rho::dwyw] = s[Rho::dhyh] = s[Rho::dwyh] = s[Rho::dhyw] = 0.0;
  return s;
}

const std::vector<Rho> kSelectionRhos = {Rho::dwyw, Rho::dhyh, Rho::dwyh, Rho::dhyw};

Vec rho_se(const CellFit& c) { return c.se.tail(5); }

}  // namespace

TEST_CASE("assemble_sigma placement and projection") {
  LocalParams p;
  AssembledSigma a = assemble_sigma(p);
  CHECK(a.corr.matrix().isIdentity());
  CHECK(!a.projected);

  p[Rho::ywyh] = 0.25;
  a = assemble_sigma(p);
  Mat expect = Mat::Identity(4, 4);
  expect(2, 3) = expect(3, 2) = 0.25;
  CHECK(a.corr.matrix() == expect);

  p[Rho::dwyw] = 0.9;
  p[Rho::dhyw] = 0.9;
  p[Rho::dwdh] = -0.9;
  CHECK(min_eigenvalue(sigma_matrix(p)) < 0.0);
  a = assemble_sigma(p);
  CHECK(a.projected);
  CHECK(a.corr.min_eigenvalue() >= kPdEps * 0.99);

  for (Rho r : kAllRhos) CHECK(parse_rho(rho_name(r)) == r);
  CHECK(parse_rho("ywyh") == Rho::ywyh);
  CHECK_THROWS_AS(parse_rho("rho_xx"), std::invalid_argument);
}

TEST_CASE("cell likelihood: quadrant probabilities") {
  const DgpSpec spec = acceptance_dgp(4000, 3);
  const SimulatedSample sim = simulate(spec);
  const SelectionSample sample(sim.data, {});
  const BiprobitFit first = first_stage(sample);
  const ThresholdGrid grid = selected_grid(sample, 4);
  SecondStageOptions opts;
  opts.draws = 4096;
  const CellLikelihood lik(sample, first, grid.cut_w(1), grid.cut_h(0), opts);
  LocalParams p = true_params(spec, grid.cut_w(1), grid.cut_h(0));
  p[Rho::dwdh] = first.rho;
  const Vec theta = lik.pack(p);
  const Mat sigma = sigma_matrix(p);

  for (int g = 0; g < sample.group_z().rows(); ++g) {
    const auto probs = lik.quadrant_probabilities(theta, g);
    double total = 0.0;
    const Vec z = sample.group_z().row(g).transpose();
    const double aw = z.dot(first.gamma_w), ah = z.dot(first.gamma_h);
    const double mw = sample.wage_rows_w(z.transpose()).row(0).dot(p.beta_w);
    const double mh = sample.wage_rows_h(z.transpose()).row(0).dot(p.beta_h);
    const double p12 = bvn_cdf(aw, ah, first.rho);
    for (int q = 0; q < 4; ++q) {
      CHECK(probs[q] >= 0.0);
      total += probs[q];
      // Independent evaluation: sign-flipped orthant through the generic GHK.
      const double sw = (q & 2) ? -1.0 : 1.0, sh = (q & 1) ? -1.0 : 1.0;
      Vec s(4);
      s << 1.0, 1.0, sw, sh;
      Vec upper(4);
      upper << aw, ah, sw * mw, sh * mh;
      const CorrelationMatrix flipped(s.asDiagonal() * sigma * s.asDiagonal());
      const GhkResult ref = mvn_cdf_ghk(upper, flipped, {20000, 99, DrawSequence::halton});
      CHECK(std::fabs(probs[q] - ref.prob / p12) <= 0.01 * probs[q] + 6 * ref.std_error / p12);
    }
    CHECK(std::fabs(total - 1.0) <= 5e-3);
  }
}

TEST_CASE("participation sign flip leaves orthant probabilities unchanged") {
  // P(U_w <= a, rest) = P(rest) - P(-U_w <= -a, rest) with the row and column
  // of U_w negated.
  LocalParams p;
  p[Rho::dwdh] = 0.2;
  p[Rho::dwyw] = -0.3;
  p[Rho::dhyh] = 0.1;
  p[Rho::dwyh] = -0.15;
  p[Rho::dhyw] = 0.05;
  p[Rho::ywyh] = 0.3;
  const Mat sigma = sigma_matrix(p);
  Vec x(4);
  x << 0.4, 0.9, -0.2, 0.6;
  const GhkOptions opts{50000, 5, DrawSequence::halton};
  const GhkResult direct = mvn_cdf_ghk(x, CorrelationMatrix(sigma), opts);
  Vec s = Vec::Ones(4);
  s(0) = -1.0;
  Vec xf = x;
  xf(0) = -x(0);
  const GhkResult flipped = mvn_cdf_ghk(xf, CorrelationMatrix(s.asDiagonal() * sigma * s.asDiagonal()), opts);
  Vec rest = x;
  rest(0) = kInf;
  const GhkResult marg = mvn_cdf_ghk(rest, CorrelationMatrix(sigma), opts);
  const double se = std::sqrt(direct.std_error * direct.std_error +
                              flipped.std_error * flipped.std_error +
                              marg.std_error * marg.std_error);
  CHECK(std::fabs(direct.prob - (marg.prob - flipped.prob)) <= 3 * se + 1e-6);
}

TEST_CASE("second stage nests bivariate distribution regression") {
  const DgpSpec spec = no_selection_dgp(30000, 12);
  const SimulatedSample sim = simulate(spec);
  const SelectionSample sample(sim.data, {});
  const BiprobitFit first = first_stage(sample);
  const ThresholdGrid grid = selected_grid(sample, 3);
  SecondStageOptions opts;
  opts.fixed_zero = kSelectionRhos;
  const double cw = grid.cut_w(0), ch = grid.cut_h(1);
  const CellFit cell = second_stage_cell(sample, first, cw, ch, opts);
  REQUIRE(cell.converged);

  // Selection-free BDR on the working couples.
  const auto& working = sample.working();
  const auto n = static_cast<Eigen::Index>(working.size());
  Mat xw(n, 2);
  Vec iw(n), ih(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    xw.row(k) << 1.0, sim.data.x(working[k], 0);
    iw(k) = sim.data.y_w(working[k]) <= cw;
    ih(k) = sim.data.y_h(working[k]) <= ch;
  }
  const ProbitFit pw = probit_fit(iw, xw), ph = probit_fit(ih, xw);
  const RhoFit rho = bdr_rho_fit(iw, ih, xw * pw.coef, xw * ph.coef);
  const Vec se = cell.se;
  CHECK(std::fabs(cell.params.beta_w(0) - pw.coef(0)) <= 3 * se(0));
  CHECK(std::fabs(cell.params.beta_w(1) - pw.coef(1)) <= 3 * se(1));
  CHECK(std::fabs(cell.params.beta_h(0) - ph.coef(0)) <= 3 * se(2));
  CHECK(std::fabs(cell.params.beta_h(1) - ph.coef(1)) <= 3 * se(3));
  CHECK(std::fabs(cell.params[Rho::ywyh] - rho.rho) <= 3 * rho_se(cell)(4));
  for (Rho r : kSelectionRhos) CHECK(cell.params[r] == 0.0);

  // Objective agreement at the BDR point.
  const CellLikelihood lik(sample, first, cw, ch, opts);
  LocalParams bdr;
  bdr.beta_w = pw.coef;
  bdr.beta_h = ph.coef;
  bdr[Rho::ywyh] = rho.rho;
  const double ll = lik.loglik(lik.pack(bdr));
  CHECK(std::fabs(ll - rho.loglik) <= 1e-3 * std::fabs(rho.loglik));
}

TEST_CASE("second stage recovers the tetravariate DGP") {
  const DgpSpec spec = acceptance_dgp(50000, 1);
  const SimulatedSample sim = simulate(spec);
  const SelectionSample sample(sim.data, {});
  const BiprobitFit first = first_stage(sample);
  CHECK(std::fabs(first.rho - spec[Rho::dwdh]) <= 3 * first.rho_se);
  const ThresholdGrid grid = selected_grid(sample, 2);
  const CellFit cell = second_stage_cell(sample, first, grid.cut_w(0), grid.cut_h(0), {});
  REQUIRE(cell.converged);
  CHECK(!cell.flagged);
  const LocalParams truth = true_params(spec, grid.cut_w(0), grid.cut_h(0));
  const Vec est = cell_parameters(cell);
  Vec tv(9);
  tv << truth.beta_w, truth.beta_h, spec[Rho::dwyw], spec[Rho::dhyh], spec[Rho::dwyh],
      spec[Rho::dhyw], spec[Rho::ywyh];
  for (int j = 0; j < 9; ++j) {
    CAPTURE(j);
    CHECK(std::fabs(est(j) - tv(j)) <= 3 * cell.se(j));
  }

  SUBCASE("exogenous-husband restriction") {
    // Averaged over replications: the mean estimate must sit within three
    // standard errors of the mean.
    const int reps = 8;
    Vec mean = Vec::Zero(5), se = Vec::Zero(5);
    for (int rep = 0; rep < reps; ++rep) {
      DgpSpec r = acceptance_dgp(50000, 100 + rep);
      r[Rho::dhyh] = r[Rho::dhyw] = 0.0;
      const SimulatedSample rs = simulate(r);
      const SelectionSample rsample(rs.data, {});
      const BiprobitFit rfirst = first_stage(rsample);
      const ThresholdGrid rgrid = selected_grid(rsample, 2);
      SecondStageOptions opts;
      opts.fixed_zero = {Rho::dhyh, Rho::dhyw};
      const CellFit restricted =
          second_stage_cell(rsample, rfirst, rgrid.cut_w(0), rgrid.cut_h(0), opts);
      REQUIRE(restricted.converged);
      CHECK(restricted.params[Rho::dhyh] == 0.0);
      CHECK(restricted.params[Rho::dhyw] == 0.0);
      CHECK(std::isnan(restricted.se(5)));
      CHECK(std::isnan(restricted.se(7)));
      if (rep == 0) {
        const CellFit free = second_stage_cell(rsample, rfirst, rgrid.cut_w(0), rgrid.cut_h(0), {});
        CHECK(restricted.loglik <= free.loglik + 1e-6);
      }
      for (int k = 0; k < 5; ++k) {
        mean(k) += restricted.params[kStageTwoRhos[k]] / reps;
        if (std::isfinite(restricted.se(4 + k))) se(k) += restricted.se(4 + k) / reps;
      }
    }
    for (int k : {0, 2, 4}) {
      CAPTURE(k);
      CAPTURE(mean(k));
      const DgpSpec truth = acceptance_dgp(1, 0);
      CHECK(std::fabs(mean(k) - truth[kStageTwoRhos[k]]) <= 3 * se(k) / std::sqrt(reps));
    }
  }
}

TEST_CASE("grid fit shape and determinism") {
  const SimulatedSample sim = simulate(acceptance_dgp(1500, 21));
  const SelectionSample sample(sim.data, {});
  const ThresholdGrid grid = selected_grid(sample, 2);
  GridOptions opts;
  opts.stage.seed = 17;
  const ModelGridFit a = fit_grid(sample, grid, opts);
  opts.workers = 3;
  const ModelGridFit b = fit_grid(sample, grid, opts);
  REQUIRE(a.cells.size() == 4);
  CHECK(a.cell(0, 0).kind == CellKind::full);
  CHECK(a.cell(0, 1).kind == CellKind::marginal_w);
  CHECK(a.cell(1, 0).kind == CellKind::marginal_h);
  CHECK(a.cell(1, 1).kind == CellKind::trivial);
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(cell_parameters(a.cells[c]) == cell_parameters(b.cells[c]));
    CHECK(a.cells[c].loglik == b.cells[c].loglik);
  }

  opts.stage.seed = 18;
  const ModelGridFit c = fit_grid(sample, grid, opts);
  CHECK(cell_parameters(c.cell(0, 0)) != cell_parameters(a.cell(0, 0)));
}

TEST_CASE("bootstrap smoke and rate") {
  const SimulatedSample sim = simulate(acceptance_dgp(2000, 5));
  const SelectionSample sample(sim.data, {});
  const ThresholdGrid grid = selected_grid(sample, 2);
  GridOptions opts;
  const BootstrapResult a = bootstrap(sim.data, {}, grid, 2, 9, opts);
  REQUIRE(a.replicates.size() == 2);
  CHECK(a.failures.empty());
  CHECK(a.indices[0] != a.indices[1]);
  const BootstrapResult b = bootstrap(sim.data, {}, grid, 2, 9, opts);
  CHECK(cell_parameters(a.replicates[1].cell(0, 0)) == cell_parameters(b.replicates[1].cell(0, 0)));
  CHECK_THROWS_AS(bootstrap(sim.data, {}, grid, 1, 9, opts), std::invalid_argument);

  // Bootstrap SD of rho_dwdh scales like 1/sqrt(n).
  std::vector<double> sd;
  for (int n : {5000, 20000, 80000}) {
    const SimulatedSample s = simulate(acceptance_dgp(n, 77));
    const SelectionSample ss(s.data, {});
    const BootstrapResult br = bootstrap(s.data, {}, selected_grid(ss, 2), 20, 3, opts);
    const ParameterSummary fs = summarize_first_stage(br);
    sd.push_back(fs.sd(fs.sd.size() - 1));
  }
  CHECK(sd[0] / sd[1] == doctest::Approx(2.0).epsilon(0.4));
  CHECK(sd[1] / sd[2] == doctest::Approx(2.0).epsilon(0.4));
}
