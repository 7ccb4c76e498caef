#include "sortsel/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <thread>

namespace sortsel {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

long parse_integer(const std::string& key, const std::string& value) {
  double v = 0.0;
  try {
    v = parse_double(value);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("config " + key + ": '" + value + "' is not an integer");
  }
  if (v != std::round(v) || std::fabs(v) > 9e15)
    throw std::invalid_argument("config " + key + ": '" + value + "' is not an integer");
  return static_cast<long>(v);
}

int positive_int(const std::string& key, const std::string& value, int min = 1) {
  const long v = parse_integer(key, value);
  if (v < min || v > 1'000'000'000)
    throw std::invalid_argument("config " + key + ": must be at least " + std::to_string(min));
  return static_cast<int>(v);
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    return parse_double(value);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("config " + key + ": '" + value + "' is not a number");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw std::invalid_argument("config " + key + ": '" + value + "' is not true or false");
}

std::uint64_t parse_seed(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (value.empty() || res.ec != std::errc() || res.ptr != value.data() + value.size())
    throw std::invalid_argument("config " + key + ": '" + value + "' is not an unsigned integer");
  return v;
}

// Keys that do not change any result file.
const std::set<std::string> kNotEchoed = {"out", "fit", "workers"};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Creates the output directory and, on destruction, the metadata sidecar.
class RunScope {
 public:
  RunScope(std::string command, const RunConfig& cfg)
      : command_(std::move(command)), out_(cfg.out), workers_(cfg.workers),
        started_(utc_now()), clock_(std::chrono::steady_clock::now()) {
    fs::create_directories(out_);
    std::cerr << command_ << ": writing to " << out_ << "\n";
  }
  void finish() {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_).count();
    write_json((fs::path(out_) / "metadata.json").string(),
               {{"command", command_},
                {"started_utc", started_},
                {"finished_utc", utc_now()},
                {"elapsed_seconds", secs},
                {"workers", workers_}});
    std::cerr << command_ << ": done in " << std::fixed << std::setprecision(1) << secs << " s\n";
  }
  std::string path(const std::string& name) const { return (fs::path(out_) / name).string(); }

 private:
  std::string command_, out_;
  int workers_;
  std::string started_;
  std::chrono::steady_clock::time_point clock_;
};

std::ofstream open_csv(const std::string& path, const std::string& header) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << header << '\n';
  return out;
}

std::string csv_number(double v) { return std::isfinite(v) ? format_double(v) : std::string(); }

HouseholdData load_households(const RunConfig& cfg, IngestReport* report) {
  if (cfg.inputs.empty()) throw std::invalid_argument("no input files: set input or pass --input");
  HouseholdData data = read_households(cfg.inputs, cfg.mapping, report);
  if (!cfg.period_bins.empty()) {
    apply_period_bins(data, cfg.period_bins);
    const int dropped = report->wages_dropped;
    *report = describe(data);
    report->wages_dropped = dropped;
  }
  return data;
}

void log_report(const IngestReport& rep) {
  std::cerr << "data: " << rep.rows << " couples, " << rep.working << " with both spouses working";
  if (rep.wages_dropped > 0) std::cerr << ", " << rep.wages_dropped << " wage fields of non-working couples dropped";
  std::cerr << "\n";
  for (const PeriodReport& p : rep.periods) {
    std::cerr << "  period " << p.period << ": " << p.rows << " couples, " << p.working << " working";
    if (p.deciles_w.size() > 0)
      std::cerr << ", median wages " << p.deciles_w(4) << " / " << p.deciles_h(4);
    std::cerr << "\n";
  }
}

json report_json(const IngestReport& rep) {
  json periods = json::array();
  for (const PeriodReport& p : rep.periods) {
    json dw = json::array(), dh = json::array();
    for (Eigen::Index i = 0; i < p.deciles_w.size(); ++i) {
      dw.push_back(p.deciles_w(i));
      dh.push_back(p.deciles_h(i));
    }
    periods.push_back({{"period", p.period}, {"rows", p.rows}, {"working", p.working},
                       {"deciles_w", dw}, {"deciles_h", dh}});
  }
  return {{"rows", rep.rows}, {"working", rep.working}, {"wages_dropped", rep.wages_dropped},
          {"periods", periods}};
}

std::vector<std::string> cell_parameter_names(const ModelGridFit& fit) {
  std::vector<std::string> names;
  for (const auto& n : fit.wage_names_w) names.push_back("beta_w:" + n);
  for (const auto& n : fit.wage_names_h) names.push_back("beta_h:" + n);
  for (Rho r : kStageTwoRhos) names.push_back(rho_name(r));
  return names;
}

std::vector<std::string> first_stage_names(const ModelGridFit& fit) {
  std::vector<std::string> names;
  for (const auto& n : fit.participation_names) names.push_back("gamma_w:" + n);
  for (const auto& n : fit.participation_names) names.push_back("gamma_h:" + n);
  names.push_back(rho_name(Rho::dwdh));
  return names;
}

void log_convergence(const ModelGridFit& fit) {
  int converged = 0;
  std::vector<std::string> flagged;
  for (int k = 0; k < fit.size(); ++k)
    for (int l = 0; l < fit.size(); ++l) {
      const CellFit& c = fit.cell(k, l);
      if (c.converged) ++converged;
      if (!c.flagged) continue;
      std::string line = "(" + std::to_string(k + 1) + "," + std::to_string(l + 1) + ")";
      for (const auto& f : c.flags) line += " " + f;
      flagged.push_back(line);
    }
  std::cerr << "  period " << fit.period << ": first stage "
            << (fit.first.converged ? "converged" : "NOT converged") << " in " << fit.first.iterations
            << " iterations; cells converged " << converged << "/" << fit.cells.size() << ", flagged "
            << flagged.size() << "\n";
  for (const auto& f : flagged) std::cerr << "    flagged " << f << "\n";
}

// Gaussian kernel density with Silverman's bandwidth on [-1, 1].
std::vector<std::pair<double, double>> kernel_density(const std::vector<double>& xs, int points = 101) {
  std::vector<std::pair<double, double>> out;
  const double n = static_cast<double>(xs.size());
  if (xs.size() < 2) return out;
  double mean = 0.0, sq = 0.0;
  for (double x : xs) mean += x / n;
  for (double x : xs) sq += (x - mean) * (x - mean);
  const double sd = std::sqrt(sq / (n - 1));
  const double h = std::max(1.06 * sd * std::pow(n, -0.2), 1e-3);
  for (int i = 0; i < points; ++i) {
    const double at = -1.0 + 2.0 * i / (points - 1);
    double f = 0.0;
    for (double x : xs) {
      const double u = (at - x) / h;
      f += std::exp(-0.5 * u * u);
    }
    out.emplace_back(at, f / (n * h * std::sqrt(2.0 * std::numbers::pi)));
  }
  return out;
}

std::vector<int> distinct_periods(const HouseholdData& d) {
  std::set<int> s(d.period.begin(), d.period.end());
  return {s.begin(), s.end()};
}

CounterfactualOptions eval_options(const RunConfig& cfg) {
  CounterfactualOptions o;
  o.draws = cfg.eval_draws;
  o.seed = cfg.seed;
  o.quant_tol = cfg.quant_tol;
  o.workers = cfg.workers;
  return o;
}

std::string period_list(const std::vector<PeriodModel>& periods) {
  std::string s;
  for (const auto& p : periods) s += (s.empty() ? "" : ", ") + std::to_string(p.period());
  return s;
}

void require_period(const std::vector<PeriodModel>& periods, int p, const std::string& what,
                    const std::string& file) {
  for (const auto& m : periods)
    if (m.period() == p) return;
  throw std::invalid_argument(what + ": period " + std::to_string(p) + " is not in " + file +
                              " (periods: " + period_list(periods) + ")");
}

json dgp_json(const DgpSpec& s) {
  json covs = json::array();
  for (const auto& c : s.covariates)
    covs.push_back({{"name", c.name}, {"values", c.values}, {"probs", c.probs}, {"excluded", c.excluded}});
  auto vec = [](const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  json rho = json::object();
  for (Rho r : kAllRhos) rho[rho_name(r)] = s[r];
  return {{"period", s.period},
          {"n", s.n},
          {"seed", s.seed},
          {"covariates", covs},
          {"gamma_w", vec(s.gamma_w)},
          {"gamma_h", vec(s.gamma_h)},
          {"wage_w", {{"coef", vec(s.wage_w.coef)}, {"scale", s.wage_w.scale}}},
          {"wage_h", {{"coef", vec(s.wage_h.coef)}, {"scale", s.wage_h.scale}}},
          {"rho", rho}};
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& i : items) s += (s.empty() ? "" : ",") + i;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration.

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "input", "d_w", "d_h", "y_w", "y_h", "weight", "period", "x", "z", "wage_x_w", "wage_x_h",
      "period_bins", "out", "fit", "grid", "ghk_draws", "eval_draws", "bootstrap", "seed", "workers",
      "compute_se", "quant_tol", "q", "r", "s", "base", "zero", "fz", "decomp_order", "statistic",
      "inequality", "couples", "table_size", "preset", "n"};
  return keys;
}

RunConfig RunConfig::from_map(const ConfigMap& values) {
  RunConfig c;
  c.workers = std::max(1u, std::thread::hardware_concurrency());
  const auto& keys = config_keys();
  for (const auto& [key, value] : values) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw std::invalid_argument("unknown config key '" + key + "'");
    if (!kNotEchoed.count(key)) c.echo[key] = value;

    if (key == "input") c.inputs = split_list(value);
    else if (key == "d_w") c.mapping.d_w = value;
    else if (key == "d_h") c.mapping.d_h = value;
    else if (key == "y_w") c.mapping.y_w = value;
    else if (key == "y_h") c.mapping.y_h = value;
    else if (key == "weight") c.mapping.weight = value;
    else if (key == "period") c.mapping.period = value;
    else if (key == "x") c.mapping.x = split_list(value);
    else if (key == "z") c.mapping.z_only = split_list(value);
    else if (key == "wage_x_w") c.design.wage_w = split_list(value);
    else if (key == "wage_x_h") c.design.wage_h = split_list(value);
    else if (key == "period_bins") c.period_bins = value;
    else if (key == "out") c.out = value;
    else if (key == "fit") c.fit = value;
    else if (key == "grid") c.grid = positive_int(key, value, 2);
    else if (key == "ghk_draws") c.ghk_draws = positive_int(key, value);
    else if (key == "eval_draws") c.eval_draws = positive_int(key, value);
    else if (key == "bootstrap") c.bootstrap = positive_int(key, value, 0);
    else if (key == "seed") c.seed = parse_seed(key, value);
    else if (key == "workers") c.workers = positive_int(key, value);
    else if (key == "compute_se") c.compute_se = parse_bool(key, value);
    else if (key == "quant_tol") {
      c.quant_tol = parse_real(key, value);
      if (!(c.quant_tol > 0)) throw std::invalid_argument("config quant_tol: must be positive");
    }
    else if (key == "q") c.q = static_cast<int>(parse_integer(key, value));
    else if (key == "r") c.r = static_cast<int>(parse_integer(key, value));
    else if (key == "s") c.s = static_cast<int>(parse_integer(key, value));
    else if (key == "base") c.base = static_cast<int>(parse_integer(key, value));
    else if (key == "zero") {
      c.zero.clear();
      for (const auto& name : split_list(value))
        c.zero.push_back(parse_rho(name.rfind("rho_", 0) == 0 ? name : "rho_" + name));
    }
    else if (key == "fz") {
      if (value == "selected") c.fz = Composition::selected;
      else if (value == "population") c.fz = Composition::population;
      else throw std::invalid_argument("config fz: expected selected or population, got '" + value + "'");
    }
    else if (key == "decomp_order") {
      c.decomp_order.clear();
      for (const auto& name : split_list(value)) c.decomp_order.push_back(parse_block(name));
      std::vector<Block> sorted = c.decomp_order;
      std::sort(sorted.begin(), sorted.end());
      if (sorted != kDefaultOrder)
        throw std::invalid_argument("config decomp_order: list each of composition, selection, "
                                    "structural, rho_ywyh exactly once");
    }
    else if (key == "statistic") c.statistic = value;
    else if (key == "inequality") c.inequality = parse_bool(key, value);
    else if (key == "couples") c.couples = positive_int(key, value, 100);
    else if (key == "table_size") c.table_size = positive_int(key, value, 2);
    else if (key == "preset") {
      if (value != "acceptance" && value != "identification" && value != "cps_like")
        throw std::invalid_argument("config preset: expected acceptance, identification or cps_like");
      c.preset = value;
    }
    else if (key == "n") c.n = positive_int(key, value, 100);
  }
  parse_statistic(c.statistic, c.table_size, c.couples, c.seed);
  return c;
}

std::string RunConfig::fit_path() const { return fit.empty() ? (fs::path(out) / "fit.json").string() : fit; }

ConfigMap merge_config(const ConfigMap& file, const ConfigMap& flags, const char* env_seed) {
  ConfigMap merged = file;
  if (env_seed && *env_seed && !file.count("seed") && !flags.count("seed")) merged["seed"] = env_seed;
  for (const auto& [k, v] : flags) merged[k] = v;
  return merged;
}

Statistic parse_statistic(const std::string& text, int table_size, int couples, std::uint64_t seed) {
  Statistic st;
  if (text == "kendall") {
    st = Statistic::kendall();
  } else if (text == "diag") {
    st = Statistic::diagonal();
  } else if (text == "ratio") {
    st = Statistic::ratio();
    st.inequality.couples = couples;
    st.inequality.seed = seed;
    st.inequality.table_size = table_size;
  } else if (text.rfind("cell:", 0) == 0) {
    const auto parts = split_list(text.substr(5));
    if (parts.size() != 2) throw std::invalid_argument("statistic: expected cell:K,L");
    const int k = positive_int("statistic", parts[0]), l = positive_int("statistic", parts[1]);
    if (k > table_size || l > table_size)
      throw std::invalid_argument("statistic: cell index beyond table_size " + std::to_string(table_size));
    st = Statistic::cell(k - 1, l - 1);
  } else {
    throw std::invalid_argument("statistic: expected kendall, diag, cell:K,L or ratio, got '" + text + "'");
  }
  st.table_size = table_size;
  return st;
}

// ---------------------------------------------------------------------------
// Runs.

void run_simulate(const RunConfig& cfg) {
  RunScope scope("simulate", cfg);
  std::vector<DgpSpec> specs;
  if (cfg.preset == "acceptance") specs = {acceptance_dgp(cfg.n, cfg.seed)};
  else if (cfg.preset == "identification") specs = {identification_dgp(cfg.n, cfg.seed)};
  else specs = cps_like_periods(cfg.n, cfg.seed);
  const SimulatedSample sim = specs.size() == 1 ? simulate(specs.front()) : simulate_periods(specs);

  write_households(scope.path("households.csv"), sim.data);
  write_latent(scope.path("latent.csv"), sim.latent);
  {
    std::ofstream ini(scope.path("households.ini"));
    ini << "# column mapping for households.csv\n"
        << "input = " << scope.path("households.csv") << "\n"
        << "x = " << join(sim.data.x_names) << "\n"
        << "z = " << join(sim.data.z_only_names) << "\n";
  }
  json periods = json::array();
  for (const auto& s : specs) periods.push_back(dgp_json(s));
  write_json(scope.path("simulate.json"), {{"config", cfg.echo}, {"preset", cfg.preset}, {"periods", periods}});
  std::cerr << "simulate: " << sim.data.size() << " couples over " << specs.size() << " period(s)\n";
  scope.finish();
}

void run_estimate(const RunConfig& cfg) {
  RunScope scope("estimate", cfg);
  IngestReport report;
  const HouseholdData data = load_households(cfg, &report);
  log_report(report);
  write_json(scope.path("data_report.json"), report_json(report));

  std::vector<PeriodModel> models;
  for (int p : distinct_periods(data)) {
    const HouseholdData sub = data.subset(data.in_period(p));
    const SelectionSample sample(sub, cfg.design);
    GridOptions go;
    go.stage.draws = cfg.ghk_draws;
    go.stage.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(p)));
    go.stage.compute_se = cfg.compute_se;
    go.workers = cfg.workers;
    std::cerr << "estimate: period " << p << ", grid " << cfg.grid << "x" << cfg.grid << "\n";
    ModelGridFit fit = fit_grid(sample, selected_grid(sample, cfg.grid), go);
    fit.period = p;
    log_convergence(fit);
    models.push_back(make_period_model(sub, std::move(fit)));
  }

  json periods = json::array();
  for (const auto& m : models) periods.push_back(to_json(m));
  write_json(scope.path("fit.json"), {{"config", cfg.echo}, {"periods", periods}});

  auto cells = open_csv(scope.path("cells.csv"), "period,k,l,kind,cut_w,cut_h,parameter,estimate,se,flagged");
  auto density = open_csv(scope.path("rho_density.csv"), "period,rho,density");
  for (const auto& m : models) {
    const ModelGridFit& fit = m.fit;
    const auto names = cell_parameter_names(fit);
    std::vector<double> full_rhos;
    for (int k = 0; k < fit.size(); ++k)
      for (int l = 0; l < fit.size(); ++l) {
        const CellFit& c = fit.cell(k, l);
        const Vec theta = cell_parameters(c);
        const double cw = k + 1 < fit.size() ? fit.grid.cuts_w(k) : kNaN;
        const double ch = l + 1 < fit.size() ? fit.grid.cuts_h(l) : kNaN;
        for (std::size_t i = 0; i < names.size(); ++i) {
          const auto idx = static_cast<Eigen::Index>(i);
          cells << fit.period << ',' << k + 1 << ',' << l + 1 << ',' << cell_kind_name(c.kind) << ','
                << csv_number(cw) << ',' << csv_number(ch) << ',' << names[i] << ','
                << csv_number(theta(idx)) << ',' << csv_number(idx < c.se.size() ? c.se(idx) : kNaN) << ','
                << (c.flagged ? 1 : 0) << '\n';
        }
        if (c.kind == CellKind::full && c.usable()) full_rhos.push_back(c.params[Rho::ywyh]);
      }
    for (const auto& [at, f] : kernel_density(full_rhos))
      density << fit.period << ',' << format_double(at) << ',' << format_double(f) << '\n';
  }

  auto tables = open_csv(scope.path("tables.csv"), kTableCsvHeader);
  auto summary = open_csv(scope.path("summary.csv"),
                          "period,source,diag_sum,kendall_tau,grouped_tau,projections,imputed_cells");
  const CounterfactualOptions eo = eval_options(cfg);
  for (const auto& m : models) {
    const HouseholdData sub = data.subset(data.in_period(m.period()));
    const auto working = sub.working();
    Vec yw(static_cast<Eigen::Index>(working.size())), yh(yw.size());
    for (std::size_t i = 0; i < working.size(); ++i) {
      yw(static_cast<Eigen::Index>(i)) = sub.y_w(working[i]);
      yh(static_cast<Eigen::Index>(i)) = sub.y_h(working[i]);
    }
    std::vector<SortingTable> out;
    if (working.size() >= 100) out.push_back(empirical_sorting_table(yw, yh, cfg.table_size));
    else std::cerr << "  period " << m.period() << ": fewer than 100 working couples, no empirical table\n";
    try {
      out.push_back(fitted_sorting_table(m, eo));
    } catch (const std::invalid_argument& e) {
      std::cerr << "  period " << m.period() << ": no model table: " << e.what() << "\n";
    }
    for (const SortingTable& t : out) {
      const std::string src = table_source_name(t.source);
      append_table_csv(tables, m.period(), src, t);
      summary << m.period() << ',' << src << ',' << csv_number(t.diag_sum) << ','
              << csv_number(t.kendall_tau) << ',' << csv_number(t.grouped_tau) << ',' << t.projections
              << ',' << t.imputed_cells << '\n';
      for (const auto& note : t.notes) std::cerr << "  period " << m.period() << " " << src << ": " << note << "\n";
    }
  }
  scope.finish();
}

std::vector<PeriodModel> load_fit(const std::string& path) {
  if (!fs::exists(path))
    throw std::invalid_argument("fit file '" + path + "' not found; run estimate first or set fit");
  const json doc = read_json(path);
  std::vector<PeriodModel> out;
  for (const json& p : doc.at("periods")) out.push_back(period_from_json(p));
  if (out.empty()) throw std::invalid_argument("fit file '" + path + "' holds no periods");
  return out;
}

void run_counterfactual(const RunConfig& cfg) {
  const std::string fit_file = cfg.fit_path();
  const std::vector<PeriodModel> periods = load_fit(fit_file);
  RunScope scope("counterfactual", cfg);

  const bool any = cfg.q || cfg.r || cfg.s;
  if (periods.size() > 1 && !(cfg.q && cfg.r && cfg.s))
    throw std::invalid_argument("counterfactual: " + fit_file + " has several periods; set q, r and s");
  if (periods.size() == 1 && any && !(cfg.q && cfg.r && cfg.s))
    throw std::invalid_argument("counterfactual: set all of q, r and s or none");
  const int only = periods.front().period();
  const int q = cfg.q.value_or(only), r = cfg.r.value_or(only), s = cfg.s.value_or(only);
  require_period(periods, q, "counterfactual q", fit_file);
  require_period(periods, r, "counterfactual r", fit_file);
  require_period(periods, s, "counterfactual s", fit_file);

  CounterfactualSpec spec = CounterfactualSpec::periods(q, r, s);
  spec.zero = cfg.zero;
  spec.fz = cfg.fz;
  const CounterfactualModel model(periods, spec, eval_options(cfg));
  std::cerr << "counterfactual: " << spec.label() << "\n";

  const SortingTable table = model.sorting_table(cfg.table_size);
  for (const auto& note : table.notes) std::cerr << "  " << note << "\n";
  {
    auto out = open_csv(scope.path("cf_table.csv"), kTableCsvHeader);
    append_table_csv(out, r, table_source_name(table.source), table);
  }

  json quantiles = json::array();
  {
    auto out = open_csv(scope.path("quantiles.csv"), "spouse,tau,value,cdf,boundary");
    for (Spouse who : {Spouse::wife, Spouse::husband})
      for (int k = 1; k < 10; ++k) {
        const double tau = k / 10.0;
        const QuantileResult qr = counterfactual_quantile(model, who, tau);
        const char* name = who == Spouse::wife ? "wife" : "husband";
        out << name << ',' << format_double(tau) << ',' << format_double(qr.value) << ','
            << format_double(qr.cdf) << ',' << (qr.boundary ? 1 : 0) << '\n';
        quantiles.push_back({{"spouse", name}, {"tau", tau}, {"value", qr.value}, {"cdf", qr.cdf},
                             {"boundary", qr.boundary}});
      }
  }

  json doc = {{"config", cfg.echo}, {"spec", spec.label()}, {"table", to_json(table)}, {"quantiles", quantiles}};
  if (cfg.inequality) {
    InequalityOptions io;
    io.couples = cfg.couples;
    io.seed = cfg.seed;
    io.table_size = cfg.table_size;
    const InequalityResult ir = inequality_ratio(model, io);
    doc["inequality"] = {{"upper", io.upper}, {"lower", io.lower}, {"couples", io.couples},
                         {"ratio", ir.ratio}, {"random_sorting", ir.random_sorting}};
    auto out = open_csv(scope.path("inequality.csv"), "series,ratio");
    out << "model," << format_double(ir.ratio) << "\nrandom_sorting," << format_double(ir.random_sorting) << '\n';
    std::cerr << "  D8/D2 ratio " << ir.ratio << ", random sorting " << ir.random_sorting << "\n";
  }
  write_json(scope.path("counterfactual.json"), doc);
  scope.finish();
}

void run_decompose(const RunConfig& cfg) {
  const std::string fit_file = cfg.fit_path();
  const std::vector<PeriodModel> periods = load_fit(fit_file);
  RunScope scope("decompose", cfg);
  int base = periods.front().period();
  for (const auto& p : periods) base = std::min(base, p.period());
  if (cfg.base) {
    require_period(periods, *cfg.base, "decompose base", fit_file);
    base = *cfg.base;
  }
  const Statistic stat = parse_statistic(cfg.statistic, cfg.table_size, cfg.couples, cfg.seed);
  std::cerr << "decompose: " << stat.label() << " from period " << base << "\n";
  const DecompositionPath path = decompose(periods, base, stat, eval_options(cfg), cfg.decomp_order, cfg.fz);

  auto out = open_csv(scope.path("decomposition.csv"), "period,series,value");
  for (const DecompositionRow& row : path.rows) {
    out << row.period << ",total," << format_double(row.total) << '\n';
    for (Block b : path.order)
      out << row.period << ',' << block_name(b) << ','
          << format_double(row.component[static_cast<std::size_t>(b)]) << '\n';
    for (const auto& note : row.notes) std::cerr << "  period " << row.period << ": " << note << "\n";
  }
  json doc = to_json(path);
  doc["config"] = cfg.echo;
  write_json(scope.path("decomposition.json"), doc);
  scope.finish();
}

void run_bootstrap(const RunConfig& cfg) {
  if (cfg.bootstrap < 1) throw std::invalid_argument("bootstrap: set bootstrap to the number of replicates");
  RunScope scope("bootstrap", cfg);
  IngestReport report;
  const HouseholdData data = load_households(cfg, &report);
  log_report(report);

  auto out = open_csv(scope.path("bootstrap.csv"), "period,block,k,l,parameter,sd,lower,upper,used");
  json failures = json::object();
  for (int p : distinct_periods(data)) {
    const HouseholdData sub = data.subset(data.in_period(p));
    const SelectionSample sample(sub, cfg.design);
    const ThresholdGrid grid = selected_grid(sample, cfg.grid);
    GridOptions go;
    go.stage.draws = cfg.ghk_draws;
    go.stage.seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(p)));
    go.stage.compute_se = false;
    go.workers = cfg.workers;
    std::cerr << "bootstrap: period " << p << ", " << cfg.bootstrap << " replicates\n";
    const BootstrapResult boot = bootstrap(sub, cfg.design, grid, cfg.bootstrap, go.stage.seed, go);
    failures[std::to_string(p)] = boot.failures;
    for (const auto& f : boot.failures) std::cerr << "  failed: " << f << "\n";
    if (boot.replicates.empty()) continue;
    const ModelGridFit& ref = boot.replicates.front();

    auto emit = [&](const std::string& block, int k, int l, const std::vector<std::string>& names,
                    const ParameterSummary& ps) {
      for (std::size_t i = 0; i < names.size(); ++i) {
        const auto idx = static_cast<Eigen::Index>(i);
        out << p << ',' << block << ',' << k << ',' << l << ',' << names[i] << ','
            << csv_number(ps.sd(idx)) << ',' << csv_number(ps.lower(idx)) << ','
            << csv_number(ps.upper(idx)) << ',' << ps.used << '\n';
      }
    };
    emit("first_stage", 0, 0, first_stage_names(ref), summarize_first_stage(boot));
    const auto names = cell_parameter_names(ref);
    for (int k = 0; k < grid.size; ++k)
      for (int l = 0; l < grid.size; ++l) emit("cell", k + 1, l + 1, names, summarize_cell(boot, k, l));
  }
  write_json(scope.path("bootstrap.json"), {{"config", cfg.echo}, {"failures", failures}});
  scope.finish();
}

// ---------------------------------------------------------------------------

std::vector<TableCsvRow> read_table_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(path + ": cannot open file");
  std::string line;
  if (!std::getline(in, line) || line != kTableCsvHeader)
    throw std::invalid_argument(path + ": expected header " + std::string(kTableCsvHeader));
  std::vector<TableCsvRow> rows;
  int row_no = 0;
  while (std::getline(in, line)) {
    ++row_no;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 7) throw std::invalid_argument(path + " row " + std::to_string(row_no) + ": expected 7 fields");
    try {
      TableCsvRow r;
      r.period = static_cast<int>(parse_integer("period", f[0]));
      r.source = f[1];
      r.row = static_cast<int>(parse_integer("row", f[2]));
      r.col = static_cast<int>(parse_integer("col", f[3]));
      r.cell = parse_double(f[4]);
      r.mass = parse_double(f[5]);
      r.se = f[6].empty() ? kNaN : parse_double(f[6]);
      rows.push_back(r);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path + " row " + std::to_string(row_no) + ": " + e.what());
    }
  }
  return rows;
}

}  // namespace sortsel
