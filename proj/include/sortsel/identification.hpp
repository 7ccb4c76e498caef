#pragma once

// Constructive identification replay on a large simulated sample.
//
// Works from cell frequencies given discrete Z, at one pair of wage
// evaluation points, in the orientation of model.hpp:
//   1. participation indices per z by inversion; rho_dwdh as the pooled root
//      of the both-work frequency;
//   2. per spouse, wage index per x and the own/cross participation-wage
//      correlations by weighted least squares on P(Y_j <= y_j, both work | z);
//   3. the cross correlation again as a pooled one-dimensional root with the
//      step-2 index and own correlation held;
//   4. rho_ywyh as the pooled root of the joint wage frequency.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sortsel/datagen.hpp"

namespace sortsel {

struct IdentificationOptions {
  double level_w = 0.5;   // evaluation point: quantile level of selected wives' wages
  double level_h = 0.5;
  int draws = 8192;       // GHK points for the trivariate/tetravariate CDFs
  std::uint64_t seed = 0;
  int scan_points = 41;
  double scan_limit = 0.95;
  /// Step-2 Jacobian conditioning below this reads as a flat objective.
  double flat_threshold = 0.03;
};

/// Pooled residual sum_z W_z (model - observed) along one correlation.
struct RhoScan {
  Rho rho = Rho::ywyh;
  Vec grid;
  Vec residual;       // NaN where Sigma is not positive definite
  int sign_changes = 0;
};

struct IdentificationReport {
  double y_w = 0.0, y_h = 0.0;
  // Per distinct participation row z (order of first occurrence).
  Mat z_rows;
  Vec mu_dw, mu_dh, true_mu_dw, true_mu_dh;
  // Per distinct wage row x.
  Mat x_rows;
  Vec mu_yw, mu_yh, true_mu_yw, true_mu_yh;
  std::array<double, 6> rho{};
  std::array<double, 6> true_rho{};
  /// Cross correlations as returned by the step-2 least squares.
  double step2_dhyw = 0.0, step2_dwyh = 0.0;
  std::vector<RhoScan> scans;  // dhyw, dwyh, ywyh
  /// Smallest over spouses of min/max singular value of the weighted step-2
  /// Jacobian. Near zero when excluded covariates do not move participation.
  double conditioning = 0.0;
  bool flat = false;
  double max_error = 0.0;
  std::vector<std::string> notes;

  double operator[](Rho r) const { return rho[static_cast<int>(r)]; }
};

IdentificationReport identification_check(const SimulatedSample& sample, const DgpSpec& truth,
                                          const IdentificationOptions& opts = {});

/// Simulates `n` households from `dgp` and runs the replay.
IdentificationReport identification_check(const DgpSpec& dgp, int n,
                                          const IdentificationOptions& opts = {});

}  // namespace sortsel
