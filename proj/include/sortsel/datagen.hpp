#pragma once

// Synthetic couples from the exact latent model, with the observation rule
// applied, plus brute-force reference values.
//
// Latent structure, in the orientation of model.hpp:
//   (u_Dw, u_Dh, e_w, e_h) ~ N(0, Sigma), Sigma constant,
//   D_j = 1(u_Dj <= z'gamma_j),
//   log Y_j* = [1, x]'coef_j + scale_j * e_j.
// Hence P(Y_j* <= y | x) = Phi([1, x]'beta_j(y)) with
//   beta_j(y) = ((log y - coef_j0) / scale_j, -coef_j1 / scale_j, ...).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sortsel/household.hpp"
#include "sortsel/model.hpp"

namespace sortsel {

/// Categorical covariate with a finite support.
struct CovariateSpec {
  std::string name;
  std::vector<double> values;
  std::vector<double> probs;
  bool excluded = false;  // enters participation only
};

struct WageModel {
  Vec coef;            // over [1, X]
  double scale = 1.0;  // sd of log wage given x
};

struct DgpSpec {
  std::vector<CovariateSpec> covariates;
  Vec gamma_w, gamma_h;            // over [1, X, Z-only]
  WageModel wage_w, wage_h;
  std::array<double, 6> rho{};     // indexed by Rho
  int n = 1000;
  std::uint64_t seed = 0;
  int period = 0;

  double operator[](Rho r) const { return rho[static_cast<int>(r)]; }
  double& operator[](Rho r) { return rho[static_cast<int>(r)]; }

  std::vector<std::string> x_names() const;
  std::vector<std::string> z_only_names() const;
};

/// Throws std::invalid_argument when dimensions disagree, probabilities are
/// invalid or Sigma is not positive definite.
void validate(const DgpSpec& spec);

/// True when every excluded covariate moves at least one participation index.
bool excluded_relevant(const DgpSpec& spec);

struct LatentTruth {
  Vec y_w, y_h;        // latent wages, observed or not
  Vec index_w, index_h;  // z'gamma
};

struct SimulatedSample {
  HouseholdData data;
  LatentTruth latent;
};

SimulatedSample simulate(const DgpSpec& spec);

/// Concatenation of several periods (period labels from each spec).
SimulatedSample simulate_periods(const std::vector<DgpSpec>& specs);

/// True wage-index coefficients at a cutoff (zeros for +inf).
Vec true_beta(const WageModel& m, double y);
/// True local parameters at a pair of cutoffs.
LocalParams true_params(const DgpSpec& spec, double y_w, double y_h);
/// Grid fit holding the true parameters at the cutoffs of `sample`'s
/// working couples. Known-truth input for the counterfactual engine.
ModelGridFit true_grid_fit(const DgpSpec& spec, const SelectionSample& sample, int size);
/// True P(Y_j* <= y | x) for a wage design row [1, x].
double true_wage_cdf(const WageModel& m, const Vec& wage_row, double y);

/// Design-row law of [1, X, Z-only]: distinct rows and their probabilities.
struct CovariateLaw {
  Mat rows;
  Vec probs;
};
CovariateLaw covariate_law(const DgpSpec& spec);

/// Preset with the acceptance correlations: rho_dwdh 0.1, rho_dwyw -0.3,
/// rho_dhyh -0.1, rho_dwyh -0.1, rho_dhyw -0.1, rho_ywyh 0.25.
DgpSpec acceptance_dgp(int n, std::uint64_t seed);

/// Replay design for the identification check: constant X, two binary
/// exclusions each shifting one spouse's participation strongly, acceptance
/// correlations. Few covariate cells keep frequency noise small at n = 1e6.
DgpSpec identification_dgp(int n, std::uint64_t seed);

/// Two synthetic periods echoing reported magnitudes: rho_ywyh 0.18 -> 0.24,
/// rho_dwyw -0.3 -> 0.2, higher wife participation and returns later.
std::vector<DgpSpec> cps_like_periods(int n, std::uint64_t seed);

struct McEstimate {
  double prob = 0.0;
  double std_error = 0.0;
};

/// Crude Monte Carlo P(X <= x), X ~ N(0, corr). Requires n_draws >= 1e4.
McEstimate mc_orthant(const Vec& x, const CorrelationMatrix& corr, long n_draws,
                      std::uint64_t seed);

/// Standard normal draw from a 64-bit generator by inversion; identical
/// across platforms for a given engine state.
double standard_normal(std::uint64_t bits);

}  // namespace sortsel
