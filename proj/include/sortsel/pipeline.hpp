#pragma once

// Batch runs behind the command-line tool. Each run reads a RunConfig,
// writes its result files into `out`, logs progress to stderr and throws on
// any hard error. Result files depend only on the configuration and seed;
// wall-clock information goes to metadata.json.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sortsel/io.hpp"

namespace sortsel {

struct RunConfig {
  std::vector<std::string> inputs;
  ColumnMapping mapping;
  DesignSpec design;           // wage_x_w / wage_x_h; empty means all of X
  std::string period_bins;
  std::string out = "out";
  std::string fit;             // fit file; empty means <out>/fit.json

  int grid = 10;
  int ghk_draws = 512;
  int eval_draws = 8192;
  int bootstrap = 0;
  std::uint64_t seed = 0;
  int workers = 1;
  bool compute_se = true;
  double quant_tol = 0.01;

  std::optional<int> q, r, s;
  std::optional<int> base;
  std::vector<Rho> zero;
  Composition fz = Composition::selected;
  std::vector<Block> decomp_order = kDefaultOrder;
  std::string statistic = "kendall";   // kendall, diag, cell:K,L (1-based), ratio
  bool inequality = false;
  int couples = 100000;
  int table_size = 10;

  std::string preset = "acceptance";   // acceptance, identification, cps_like
  int n = 50000;

  /// Keys and values as given, for the echo in result files.
  ConfigMap echo;

  /// Applies `values` over the defaults. Unknown keys and malformed values
  /// throw std::invalid_argument naming the key.
  static RunConfig from_map(const ConfigMap& values);

  std::string fit_path() const;
};

/// Merges the sources of a run: config file values, then SORTSEL_SEED when
/// neither the file nor the flags set a seed, then flags.
ConfigMap merge_config(const ConfigMap& file, const ConfigMap& flags, const char* env_seed);

/// Keys accepted by RunConfig::from_map.
const std::vector<std::string>& config_keys();

Statistic parse_statistic(const std::string& text, int table_size, int couples, std::uint64_t seed);

void run_simulate(const RunConfig& cfg);
void run_estimate(const RunConfig& cfg);
void run_counterfactual(const RunConfig& cfg);
void run_decompose(const RunConfig& cfg);
void run_bootstrap(const RunConfig& cfg);

/// Loads the period models written by run_estimate. Throws
/// std::invalid_argument naming the file when it is missing.
std::vector<PeriodModel> load_fit(const std::string& path);

/// One row of a long-format table CSV.
struct TableCsvRow {
  int period = 0;
  std::string source;
  int row = 0, col = 0;
  double cell = 0.0, mass = 0.0, se = 0.0;   // se NaN when absent
};
std::vector<TableCsvRow> read_table_csv(const std::string& path);

}  // namespace sortsel
