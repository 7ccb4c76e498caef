#pragma once

// Tetravariate selection model: first-stage bivariate probit for the two
// participation decisions and, at every pair of wage cutoffs, a simulated
// multivariate probit for the wage indices and local correlations.
//
// Orientation. Everything is expressed for the events {D_j = 1} and
// {Y_j <= y_j}: P(D_j = 1 | z) = Phi(z'gamma_j) and
// P(Y_j <= y_j | x) = Phi(x'beta_j(y_j)) before selection. The correlation
// matrix is ordered (D_w, D_h, Y_w, Y_h). A model written for latent
// variables with D_j = 1(D_j* <= 0) and wage events {Y_j* <= y_j} carries the
// opposite sign on the four participation-wage correlations:
//   rho_{D_j*, Y_k*} = -rho_{d_j y_k} (here),  rho_{D_w*, D_h*} = rho_dwdh,
//   rho_{Y_w*, Y_h*} = rho_ywyh.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sortsel/distreg.hpp"
#include "sortsel/household.hpp"

namespace sortsel {

enum class Rho { dwdh, dwyw, dhyh, dwyh, dhyw, ywyh };

inline constexpr std::array<Rho, 6> kAllRhos = {Rho::dwdh, Rho::dwyw, Rho::dhyh,
                                                Rho::dwyh, Rho::dhyw, Rho::ywyh};
/// The five correlations estimated in the second stage, in parameter order.
inline constexpr std::array<Rho, 5> kStageTwoRhos = {Rho::dwyw, Rho::dhyh, Rho::dwyh,
                                                     Rho::dhyw, Rho::ywyh};

/// "rho_dwdh", "rho_dwyw", ...
std::string rho_name(Rho r);
/// Inverse of rho_name; throws std::invalid_argument for unknown names.
Rho parse_rho(const std::string& name);
/// Position (row, column) of the correlation in the (D_w, D_h, Y_w, Y_h) matrix.
std::pair<int, int> rho_position(Rho r);

struct LocalParams {
  Vec beta_w;
  Vec beta_h;
  std::array<double, 6> rho{};  // indexed by Rho
  int cell_w = -1;
  int cell_h = -1;

  double& operator[](Rho r) { return rho[static_cast<int>(r)]; }
  double operator[](Rho r) const { return rho[static_cast<int>(r)]; }
};

struct AssembledSigma {
  CorrelationMatrix corr;
  bool projected = false;   // projection moved some entry by more than 1e-6
  double max_change = 0.0;
};

/// Raw 4x4 matrix of `p`, without any check.
Mat sigma_matrix(const LocalParams& p);
/// Validated and, when needed, PD-projected correlation matrix of `p`.
AssembledSigma assemble_sigma(const LocalParams& p, double pd_eps = kPdEps);

// ---------------------------------------------------------------------------
// Prepared estimation sample.

/// Designs and grouping of a household sample. Working couples are grouped
/// by their participation row (which determines the wage rows).
class SelectionSample {
 public:
  SelectionSample(HouseholdData data, DesignSpec design);

  const HouseholdData& data() const { return data_; }
  const DesignSpec& design() const { return design_; }
  const Mat& z() const { return z_; }
  int wage_dim_w() const { return static_cast<int>(cols_w_.size()); }
  int wage_dim_h() const { return static_cast<int>(cols_h_.size()); }
  const std::vector<int>& wage_cols_w() const { return cols_w_; }
  const std::vector<int>& wage_cols_h() const { return cols_h_; }

  /// Working couples.
  const std::vector<int>& working() const { return working_; }
  /// Distinct participation rows among working couples.
  const Mat& group_z() const { return group_z_; }
  /// Working-couple position -> group.
  const std::vector<int>& group_of() const { return group_of_; }
  /// Per-group key for draw seeding (a hash of the participation row).
  const std::vector<std::uint64_t>& group_key() const { return group_key_; }

  Mat wage_rows_w(const Mat& zrows) const;
  Mat wage_rows_h(const Mat& zrows) const;

 private:
  HouseholdData data_;
  DesignSpec design_;
  Mat z_;
  std::vector<int> cols_w_, cols_h_;
  std::vector<int> working_;
  Mat group_z_;
  std::vector<int> group_of_;
  std::vector<std::uint64_t> group_key_;
};

BiprobitFit first_stage(const SelectionSample& sample);

// ---------------------------------------------------------------------------
// Second stage.

enum class CellKind { full, marginal_w, marginal_h, trivial };
std::string cell_kind_name(CellKind k);

struct SecondStageOptions {
  int draws = 512;
  std::uint64_t seed = 0;
  std::uint64_t replicate = 0;       // bootstrap replicate, 0 for the main fit
  std::vector<Rho> fixed_zero;       // stage-two correlations held at 0
  bool compute_se = true;
  double grad_tol = 1e-4;
  double f_tol = 1e-8;
  int max_iter = 200;
  double boundary = 0.995;
};

struct CellFit {
  CellKind kind = CellKind::full;
  LocalParams params;
  /// Standard errors in parameter order (beta_w, beta_h, five stage-two
  /// correlations); NaN for parameters that are fixed or not estimated.
  Vec se;
  double loglik = 0.0;
  bool converged = false;
  bool flagged = false;
  std::vector<std::string> flags;
  int iterations = 0;
  double grad_norm = 0.0;

  bool usable() const { return !flagged; }
};

/// Simulated log-likelihood of the working couples at one cutoff pair.
/// Cutoffs may be +inf (marginal cells). The reported value includes the
/// -log Phi_2 selection normalization.
class CellLikelihood {
 public:
  CellLikelihood(const SelectionSample& sample, const BiprobitFit& first, double cut_w,
                 double cut_h, const SecondStageOptions& opts);

  CellKind kind() const { return kind_; }
  /// Full parameter vector (beta_w, beta_h, atanh of the five correlations).
  int dim() const { return pw_ + ph_ + 5; }
  /// Mean negative log-likelihood and its gradient; +inf if Sigma is not PD.
  double operator()(const Vec& theta, Vec* grad, Mat* bhhh = nullptr) const;
  /// Total log-likelihood (weighted sum).
  double loglik(const Vec& theta) const;
  /// Sum of weights of the working couples.
  double total_weight() const { return wsum_; }
  /// Weight in each wage quadrant (w<=,h<=), (w<=,h>), (w>,h<=), (w>,h>).
  std::array<double, 4> quadrant_weight() const { return quad_w_; }

  /// Conditional quadrant probabilities of one group at `theta`.
  std::array<double, 4> quadrant_probabilities(const Vec& theta, int group) const;

  Vec pack(const LocalParams& p) const;
  LocalParams unpack(const Vec& theta) const;

 private:
  double evaluate(const Vec& theta, Vec* grad, Mat* bhhh,
                  std::vector<std::array<double, 4>>* probs) const;

  const SelectionSample& sample_;
  CellKind kind_;
  int pw_, ph_;
  double rho_dd_;
  double wsum_ = 0.0;
  std::array<double, 4> quad_w_{};
  Mat xw_, xh_;                           // per group
  Vec aw_, ah_;                           // first-stage indices per group
  std::vector<std::array<double, 4>> w_;  // quadrant weights per group
  Mat base_;                              // R x 3 base points
  Mat shift_;                             // groups x 3
  // Cached first-stage GHK pieces (eta_1, eta_2, e_1 e_2) per group and draw.
  std::vector<double> cache_;
  bool cached_ = false;
};

/// Fits one cell. cut_w / cut_h may be +inf.
CellFit second_stage_cell(const SelectionSample& sample, const BiprobitFit& first,
                          double cut_w, double cut_h, const SecondStageOptions& opts);

struct ModelGridFit {
  BiprobitFit first;
  ThresholdGrid grid;
  std::vector<CellFit> cells;   // grid.size x grid.size, index k * size + l
  int period = 0;
  std::vector<std::string> participation_names;  // "const", X..., Z-only...
  std::vector<std::string> wage_names_w, wage_names_h;
  std::vector<int> wage_cols_w, wage_cols_h;     // positions inside the participation row

  int size() const { return grid.size; }
  const CellFit& cell(int k, int l) const { return cells[static_cast<std::size_t>(k * grid.size + l)]; }
  CellFit& cell(int k, int l) { return cells[static_cast<std::size_t>(k * grid.size + l)]; }
  int flagged_count() const;
};

struct GridOptions {
  SecondStageOptions stage;
  int workers = 1;
};

/// Grid of cutoffs from the working couples of `sample`.
ThresholdGrid selected_grid(const SelectionSample& sample, int size);

/// First stage once, then every cell of `grid` (size x size, top level open).
ModelGridFit fit_grid(const SelectionSample& sample, const ThresholdGrid& grid,
                      const GridOptions& opts);

// ---------------------------------------------------------------------------
// Bootstrap.

struct BootstrapResult {
  std::vector<ModelGridFit> replicates;
  std::vector<std::vector<int>> indices;  // resampled household rows per replicate
  std::vector<std::string> failures;      // one message per failed replicate
};

/// Household bootstrap: resample with replacement, keep the grid cutoffs of
/// the original fit, rerun both steps.
BootstrapResult bootstrap(const HouseholdData& data, const DesignSpec& design,
                          const ThresholdGrid& grid, int replicates, std::uint64_t seed,
                          const GridOptions& opts);

/// Per-parameter summary across replicates for one cell. Parameter order
/// matches CellFit::se; correlations are on the correlation scale.
struct ParameterSummary {
  Vec sd;
  Vec lower;   // percentile interval
  Vec upper;
  int used = 0;
};

/// Vector (beta_w, beta_h, five stage-two correlations) of a cell.
Vec cell_parameters(const CellFit& cell);
ParameterSummary summarize_cell(const BootstrapResult& boot, int k, int l,
                                double coverage = 0.9);
/// SD and interval of the first-stage (gamma_w, gamma_h, rho_dwdh).
ParameterSummary summarize_first_stage(const BootstrapResult& boot, double coverage = 0.9);

/// Deterministic 64-bit mixing (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace sortsel
