#pragma once

// Household CSV ingest and output, run configuration files, and the JSON
// results schema for fits, tables and decomposition paths.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "sortsel/counterfactual.hpp"
#include "sortsel/datagen.hpp"

namespace sortsel {

/// Input errors that name the file and row (1-based data row, header
/// excluded) where they occur.
class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ColumnMapping {
  std::string d_w = "d_w", d_h = "d_h", y_w = "y_w", y_h = "y_h";
  std::string weight = "weight";   // empty: unit weights
  std::string period = "period";   // empty: everything is period 0
  std::vector<std::string> x;      // wage covariates
  std::vector<std::string> z_only; // excluded participation covariates
};

struct PeriodReport {
  int period = 0;
  int rows = 0;
  int working = 0;
  Vec deciles_w, deciles_h;   // selected-sample cutoffs at k / 10
};

struct IngestReport {
  int rows = 0;
  int working = 0;
  int wages_dropped = 0;   // wage fields present for non-working couples
  std::vector<PeriodReport> periods;
};

/// Reads one or more CSV files with identical headers. Every mapped column
/// must exist and every header column must be mapped. Throws IngestError on
/// the first offending row: non-numeric or non-finite values, participation
/// outside {0, 1}, a missing or non-positive wage for a working couple.
/// Wages given for non-working couples are dropped and counted.
HouseholdData read_households(const std::vector<std::string>& paths, const ColumnMapping& mapping,
                              IngestReport* report = nullptr);

/// Writes the mapped schema; NaN wages become empty fields. Numbers use the
/// shortest representation that reads back to the same double.
void write_households(const std::string& path, const HouseholdData& data);
void write_latent(const std::string& path, const LatentTruth& latent);

/// Data report computed from an already loaded sample.
IngestReport describe(const HouseholdData& data);

/// Period relabelling. `spec` is either a bin width ("5": bins of five
/// consecutive period values starting at the smallest) or a comma list of
/// inclusive ranges ("1976-1980,1981-1985"). Each bin is labelled by its
/// lower bound. Throws IngestError if a period falls in no bin or in two.
void apply_period_bins(HouseholdData& data, const std::string& spec);

/// Shortest round-trip decimal form.
std::string format_double(double v);
/// Strict parse of a whole field; throws std::invalid_argument.
double parse_double(const std::string& field);

// ---------------------------------------------------------------------------
// Configuration files.

using ConfigMap = std::map<std::string, std::string>;

/// INI/TOML-style `key = value` file. Comment lines start with '#' or ';'.
/// Section headers only group keys visually and are dropped. Surrounding
/// quotes are stripped from values.
ConfigMap read_config(const std::string& path);
std::vector<std::string> split_list(const std::string& value);

// ---------------------------------------------------------------------------
// JSON results schema. NaN is written as null and read back as NaN.

nlohmann::json to_json(const ModelGridFit& fit);
ModelGridFit fit_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PeriodModel& period);
PeriodModel period_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SortingTable& table);
SortingTable table_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DecompositionPath& path);

/// Writes `j` with two-space indentation and a trailing newline.
void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

/// Long-format rows: period,source,row,col,cell,mass,se (1-based deciles).
void append_table_csv(std::ostream& out, int period, const std::string& source,
                      const SortingTable& table);
inline constexpr const char* kTableCsvHeader = "period,source,row,col,cell,mass,se";

}  // namespace sortsel
