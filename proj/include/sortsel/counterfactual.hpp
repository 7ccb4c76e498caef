#pragma once

// Sorting tables, counterfactual distributions and decompositions.
//
// A counterfactual takes participation parameters (gamma's, rho_dwdh and
// the four participation-wage correlations) from one period, wage-index
// coefficients from a second, rho_ywyh from a third and the covariate
// distribution from a fourth. The usual (q, r, s) triple sets the third
// equal to the second.
//
// Cell parameters are interpolated across each period's grid linearly in
// log wage: indices extrapolate beyond the outer cutoffs, correlations are
// held at their edge values. Flagged cells are replaced by their nearest
// usable neighbour on the grid and counted.

#include <array>
#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "sortsel/model.hpp"

namespace sortsel {

// ---------------------------------------------------------------------------
// Kendall rank correlation.

/// Tau-b of paired samples (tie corrected), O(n log n). Requires n >= 2.
double kendall_tau_b(const Vec& x, const Vec& y);

/// Tau-b of an ordinal contingency table of nonnegative masses.
double kendall_tau_b(const Mat& table);

// ---------------------------------------------------------------------------
// Sorting tables.

enum class TableSource { empirical, model, counterfactual };
std::string table_source_name(TableSource s);

struct SortingTable {
  /// P(cell) / (P(row) P(column)); random sorting gives 1 everywhere.
  Mat cells;
  /// Cell masses P(cell).
  Mat mass;
  double diag_sum = 0.0;
  /// Tau-b on the raw pairs for empirical tables, else the grouped tau-b.
  double kendall_tau = 0.0;
  double grouped_tau = 0.0;
  TableSource source = TableSource::empirical;
  /// Simulation standard errors of `cells` (model tables only).
  Mat se;
  Vec thresholds_w, thresholds_h;   // interior cutoffs
  int projections = 0;              // correlation matrices moved to PD
  int imputed_cells = 0;            // flagged grid cells replaced
  std::vector<std::string> notes;

  int size() const { return static_cast<int>(cells.rows()); }
};

/// Decile-style table of couples' wages: cutoffs from each marginal by
/// midranks, masses divided by the random-sorting mass. Requires n >= 100.
SortingTable empirical_sorting_table(const Vec& y_w, const Vec& y_h, int size = 10);

// ---------------------------------------------------------------------------
// Period models.

/// Distinct participation rows with normalized weights.
struct CovariateSample {
  Mat rows;
  Vec weights;
};

enum class Composition { selected, population };

/// Distinct participation rows of working couples (selected) or of all
/// couples (population).
CovariateSample covariate_sample(const HouseholdData& data, Composition which);

/// A fitted period together with its covariate distributions.
struct PeriodModel {
  ModelGridFit fit;
  CovariateSample selected;
  CovariateSample population;
  double min_w = 0.0, max_w = 0.0, min_h = 0.0, max_h = 0.0;  // selected wages

  int period() const { return fit.period; }
};

/// `data` must be the household sample the fit was estimated on.
PeriodModel make_period_model(const HouseholdData& data, ModelGridFit fit);

// ---------------------------------------------------------------------------
// Counterfactual specification and evaluation.

struct CounterfactualSpec {
  int selection = 0;    // gammas, rho_dwdh, participation-wage correlations
  int wage = 0;         // wage-index coefficients
  int sorting = 0;      // rho_ywyh
  int composition = 0;  // covariate distribution
  std::vector<Rho> zero;  // correlations set to 0 after assembly
  Composition fz = Composition::selected;

  /// Selection from q, wage structure (coefficients and rho_ywyh) from r,
  /// covariates from s.
  static CounterfactualSpec periods(int q, int r, int s);
  static CounterfactualSpec own(int p) { return periods(p, p, p); }
  std::string label() const;
};

struct CounterfactualOptions {
  int draws = 8192;
  std::uint64_t seed = 0;
  double quant_tol = 0.01;   // bisection bracket on the wage scale
  int workers = 1;
};

struct QuantileResult {
  double value = 0.0;
  double cdf = 0.0;          // averaged CDF at `value`
  bool boundary = false;     // level not reached inside the bracket
};

enum class Spouse { wife, husband };

class CounterfactualModel {
 public:
  /// Throws std::invalid_argument when a referenced period is missing or
  /// the periods use different designs. Keeps no reference to `periods`.
  CounterfactualModel(const std::vector<PeriodModel>& periods, CounterfactualSpec spec,
                      CounterfactualOptions opts = {});

  const CounterfactualSpec& spec() const { return spec_; }
  const CounterfactualOptions& options() const { return opts_; }

  /// Covariate-averaged P(Y_w <= y_w, Y_h <= y_h | both work); +inf allowed.
  double joint_cdf(double y_w, double y_h, double* se = nullptr) const;
  /// Covariate-averaged marginal CDF among working couples.
  double marginal_cdf(Spouse who, double y, double* se = nullptr) const;
  /// Infimum-style quantile by bisection on the marginal CDF.
  QuantileResult quantile(Spouse who, double tau) const;
  /// rho_ywyh of the sorting period at a wage pair (after overrides).
  double wage_correlation(double y_w, double y_h) const;

  /// Table at the counterfactual quantiles k / size.
  SortingTable sorting_table(int size = 10) const;

  /// Bisection bracket for one spouse.
  std::pair<double, double> bracket(Spouse who) const;
  int projections() const;
  int imputed_cells() const { return imputed_; }

  struct Lattice;

 private:
  struct Row {
    double weight = 0.0;
    double a = 0.0, b = 0.0;  // participation indices from the selection period
    double both = 0.0;        // Phi_2(a, b; rho_dwdh)
    Vec x_w, x_h;             // wage rows
    Vec marginal_w, marginal_h;  // sorted wage indices at the marginal cutoffs
  };

  LocalParams joint_params(double y_w, double y_h) const;
  LocalParams marginal_params(Spouse who, double y) const;
  CorrelationMatrix sigma(LocalParams p) const;

  CounterfactualSpec spec_;
  CounterfactualOptions opts_;
  std::vector<Row> rows_;
  std::shared_ptr<const Lattice> sel_lat_, wage_lat_, sort_lat_;
  UniformPointSet points_;
  double rho_dd_ = 0.0;
  std::array<double, 4> range_{};  // min_w, max_w, min_h, max_h of the wage period
  int imputed_ = 0;
  std::shared_ptr<std::atomic<int>> projections_;
};

QuantileResult counterfactual_quantile(const CounterfactualModel& model, Spouse who, double tau);

/// Table for `spec`; thresholds are re-solved counterfactual quantiles.
SortingTable model_sorting_measure(const std::vector<PeriodModel>& periods,
                                   const CounterfactualSpec& spec,
                                   const CounterfactualOptions& opts = {}, int size = 10);

/// Table straight from one fit: its own cells and cutoffs, no interpolation
/// and no quantile solving.
SortingTable fitted_sorting_table(const PeriodModel& period, const CounterfactualOptions& opts = {});

// ---------------------------------------------------------------------------
// Inequality.

/// Q(upper) / Q(lower) of y_w + y_h.
double inequality_ratio(const Vec& y_w, const Vec& y_h, double upper = 0.8, double lower = 0.2);

/// Same ratio after pairing the spouses by an independent permutation.
double random_sorting_ratio(const Vec& y_w, const Vec& y_h, std::uint64_t seed,
                            double upper = 0.8, double lower = 0.2);

struct InequalityOptions {
  int couples = 100000;
  std::uint64_t seed = 0;
  double upper = 0.8, lower = 0.2;
  int cdf_points = 200;     // log-spaced evaluation points per marginal
  int table_size = 10;
};

struct SimulatedCouples {
  Vec y_w, y_h;
};

/// Couples from the counterfactual joint distribution: decile cell drawn
/// from the table masses, position inside the cell from a Gaussian copula
/// with the cell's rho_ywyh, wages from the rearranged marginal quantile
/// functions.
SimulatedCouples simulate_couples(const CounterfactualModel& model, const InequalityOptions& opts);

struct InequalityResult {
  double ratio = 0.0;
  double random_sorting = 0.0;
};

InequalityResult inequality_ratio(const CounterfactualModel& model, const InequalityOptions& opts = {});

// ---------------------------------------------------------------------------
// Decomposition.

enum class Block { composition, selection, structural, sorting };
std::string block_name(Block b);
Block parse_block(const std::string& name);
inline const std::vector<Block> kDefaultOrder = {Block::composition, Block::selection,
                                                 Block::structural, Block::sorting};

/// Scalar summary of a counterfactual.
struct Statistic {
  enum class Kind { cell, diagonal, kendall, ratio };
  Kind kind = Kind::kendall;
  int k = 0, l = 0;          // cell indices for Kind::cell
  int table_size = 10;
  InequalityOptions inequality;  // Kind::ratio

  static Statistic cell(int k, int l) { return {Kind::cell, k, l, 10, {}}; }
  static Statistic diagonal() { return {Kind::diagonal, 0, 0, 10, {}}; }
  static Statistic kendall() { return {Kind::kendall, 0, 0, 10, {}}; }
  static Statistic ratio(double upper = 0.8, double lower = 0.2);
  std::string label() const;
  double evaluate(const CounterfactualModel& model) const;
};

struct DecompositionRow {
  int period = 0;
  double base_value = 0.0;   // statistic at the base period
  double value = 0.0;        // statistic at this period
  double total = 0.0;
  std::vector<double> component;  // indexed by Block
  std::vector<std::string> notes;
};

struct DecompositionPath {
  int base = 0;
  std::vector<Block> order;
  std::string statistic;
  std::vector<DecompositionRow> rows;
};

/// Sequential substitution from `base`: blocks are switched to each target
/// period in `order`, each component being the change from that switch.
/// Components sum to the total by construction.
DecompositionPath decompose(const std::vector<PeriodModel>& periods, int base,
                            const Statistic& statistic, const CounterfactualOptions& opts = {},
                            const std::vector<Block>& order = kDefaultOrder,
                            Composition fz = Composition::selected);

}  // namespace sortsel
