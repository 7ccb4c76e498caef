#include <doctest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "sortsel/pipeline.hpp"

using namespace sortsel;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sortsel_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool same_bits(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_bits(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

const char* kFixture =
    "d_w,d_h,y_w,y_h,weight,period,educ,kids\n"
    "1,1,12.5,20,1,1990,1,0\n"
    "1,0,,,1,1990,0,1\n"
    "0,1,,,2,1990,2,1\n"
    "0,0,,,1,1990,1,0\n"
    "1,1,8.25,15.75,1,1990,0,0\n"
    "1,1,30,28,1.5,1991,2,0\n"
    "1,1,9,11,1,1991,1,1\n"
    "0,1,,14,1,1991,0,1\n"
    "1,1,14,19,0.5,1991,2,0\n"
    "1,0,,,1,1991,1,1\n";

ColumnMapping fixture_mapping() {
  ColumnMapping m;
  m.x = {"educ"};
  m.z_only = {"kids"};
  return m;
}

std::string ingest_error(const std::string& csv, ColumnMapping m = fixture_mapping()) {
  const fs::path dir = scratch("errors");
  write_file(dir / "bad.csv", csv);
  try {
    read_households({(dir / "bad.csv").string()}, m);
  } catch (const IngestError& e) {
    return e.what();
  }
  return "";
}

RunConfig config(const ConfigMap& values) { return RunConfig::from_map(values); }

// Result files compared for byte identity: everything but the sidecar.
std::map<std::string, std::string> results(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().filename() != "metadata.json") out[e.path().filename().string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST_CASE("number formatting round-trips exactly") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 2000; ++i) {
    const double v = i % 3 == 0 ? std::ldexp(u(rng), -40) : u(rng);
    CHECK(std::bit_cast<std::uint64_t>(parse_double(format_double(v))) == std::bit_cast<std::uint64_t>(v));
  }
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(0.1) == "0.1");
  CHECK_THROWS_AS(parse_double("1.5x"), std::invalid_argument);
  CHECK_THROWS_AS(parse_double(""), std::invalid_argument);
}

TEST_CASE("ingest of a well-formed fixture") {
  const fs::path dir = scratch("fixture");
  write_file(dir / "f.csv", kFixture);
  IngestReport rep;
  const HouseholdData d = read_households({(dir / "f.csv").string()}, fixture_mapping(), &rep);
  CHECK(d.size() == 10);
  CHECK(rep.rows == 10);
  CHECK(rep.working == 5);
  CHECK(rep.wages_dropped == 1);   // y_h = 14 for a couple where the wife does not work
  CHECK(std::isnan(d.y_h(7)));
  CHECK(d.y_w(4) == 8.25);
  CHECK(d.weight(5) == 1.5);
  CHECK(d.period[5] == 1991);
  CHECK(d.x(2, 0) == 2.0);
  CHECK(d.z_only(1, 0) == 1.0);
  REQUIRE(rep.periods.size() == 2);
  CHECK(rep.periods[0].working == 2);
  CHECK(rep.periods[1].rows == 5);

  SUBCASE("two files concatenate") {
    write_file(dir / "g.csv", kFixture);
    const HouseholdData two =
        read_households({(dir / "f.csv").string(), (dir / "g.csv").string()}, fixture_mapping());
    CHECK(two.size() == 20);
  }
  SUBCASE("custom header names") {
    std::string renamed = kFixture;
    renamed.replace(0, renamed.find('\n'), "wife_ft,husb_ft,wage_w,wage_h,wt,year,educ,kids");
    write_file(dir / "r.csv", renamed);
    ColumnMapping m = fixture_mapping();
    m.d_w = "wife_ft";
    m.d_h = "husb_ft";
    m.y_w = "wage_w";
    m.y_h = "wage_h";
    m.weight = "wt";
    m.period = "year";
    CHECK(read_households({(dir / "r.csv").string()}, m).size() == 10);
  }
}

TEST_CASE("ingest rejects bad rows with the row number") {
  const std::string head = "d_w,d_h,y_w,y_h,weight,period,educ,kids\n";
  const std::string good = "1,1,10,12,1,0,1,0\n";

  std::string msg = ingest_error(head + good + good + "1,1,,12,1,0,1,0\n");
  CHECK(msg.find("row 3") != std::string::npos);
  CHECK(msg.find("y_w is missing") != std::string::npos);

  msg = ingest_error(head + good + "1,1,ten,12,1,0,1,0\n");
  CHECK(msg.find("row 2") != std::string::npos);
  CHECK(msg.find("not numeric") != std::string::npos);

  msg = ingest_error(head + "1,1,10,-3,1,0,1,0\n");
  CHECK(msg.find("must be positive") != std::string::npos);

  msg = ingest_error(head + "2,1,10,12,1,0,1,0\n");
  CHECK(msg.find("0 or 1") != std::string::npos);

  msg = ingest_error(head + good + "1,1,10,12,1,0\n");
  CHECK(msg.find("row 2: expected 8 fields") != std::string::npos);

  msg = ingest_error(head + "1,1,10,12,-1,0,1,0\n");
  CHECK(msg.find("nonnegative") != std::string::npos);

  msg = ingest_error(head + "1,1,10,12,1,0.5,1,0\n");
  CHECK(msg.find("integer") != std::string::npos);

  msg = ingest_error("d_w,d_h,y_w,y_h,weight,period,educ,kids,extra\n1,1,10,12,1,0,1,0,3\n");
  CHECK(msg.find("'extra' is not mapped") != std::string::npos);

  ColumnMapping m = fixture_mapping();
  m.x.push_back("age");
  msg = ingest_error(head + good, m);
  CHECK(msg.find("'age' not in header") != std::string::npos);

  CHECK(ingest_error(head).find("no data rows") != std::string::npos);
}

TEST_CASE("simulated data round-trips bit-exactly through ingest") {
  const fs::path dir = scratch("roundtrip");
  for (const auto& specs : {std::vector<DgpSpec>{acceptance_dgp(3000, 21)}, cps_like_periods(1500, 22)}) {
    const SimulatedSample sim = specs.size() == 1 ? simulate(specs[0]) : simulate_periods(specs);
    write_households((dir / "h.csv").string(), sim.data);
    ColumnMapping m;
    m.x = sim.data.x_names;
    m.z_only = sim.data.z_only_names;
    const HouseholdData back = read_households({(dir / "h.csv").string()}, m);
    CHECK(same_bits(back.d_w, sim.data.d_w));
    CHECK(same_bits(back.d_h, sim.data.d_h));
    CHECK(same_bits(back.y_w, sim.data.y_w));   // NaN payloads included
    CHECK(same_bits(back.y_h, sim.data.y_h));
    CHECK(same_bits(back.weight, sim.data.weight));
    CHECK(same_bits(back.x, sim.data.x));
    CHECK(same_bits(back.z_only, sim.data.z_only));
    CHECK(back.period == sim.data.period);
    CHECK(back.x_names == sim.data.x_names);
  }
}

TEST_CASE("period bins") {
  HouseholdData d = simulate(acceptance_dgp(200, 1)).data;
  for (int i = 0; i < d.size(); ++i) d.period[static_cast<std::size_t>(i)] = 1976 + i % 11;

  HouseholdData a = d;
  apply_period_bins(a, "5");
  std::set<int> labels(a.period.begin(), a.period.end());
  CHECK(labels == std::set<int>{1976, 1981, 1986});

  HouseholdData b = d;
  apply_period_bins(b, "1976-1980, 1981-1986");
  labels = {b.period.begin(), b.period.end()};
  CHECK(labels == std::set<int>{1976, 1981});
  CHECK(b.period[10] == 1981);   // 1986 is in the six-year bin

  HouseholdData c = d;
  CHECK_THROWS_AS(apply_period_bins(c, "1976-1980"), IngestError);   // 1981+ uncovered
  c = d;
  CHECK_THROWS_AS(apply_period_bins(c, "1976-1982,1980-1986"), IngestError);
}

TEST_CASE("configuration files and precedence") {
  const fs::path dir = scratch("config");
  write_file(dir / "run.ini",
             "# estimation run\n"
             "[data]\n"
             "input = \"a.csv, b.csv\"\n"
             "x = educ, south\n"
             "z = kids\n"
             "[model]\n"
             "grid = 6\n"
             "ghk_draws = 256\n"
             "; seed comes from the environment\n");
  const ConfigMap file = read_config((dir / "run.ini").string());
  CHECK(file.at("grid") == "6");
  CHECK(file.at("input") == "a.csv, b.csv");

  SUBCASE("file values apply, flags win, environment is a seed fallback") {
    const RunConfig c = config(merge_config(file, {{"grid", "4"}}, "99"));
    CHECK(c.inputs == std::vector<std::string>{"a.csv", "b.csv"});
    CHECK(c.mapping.x == std::vector<std::string>{"educ", "south"});
    CHECK(c.grid == 4);
    CHECK(c.ghk_draws == 256);
    CHECK(c.seed == 99);
    CHECK(config(merge_config(file, {{"seed", "5"}}, "99")).seed == 5);
    ConfigMap with_seed = file;
    with_seed["seed"] = "7";
    CHECK(config(merge_config(with_seed, {}, "99")).seed == 7);
    CHECK(config(merge_config(file, {}, nullptr)).seed == 0);
  }
  SUBCASE("defaults") {
    const RunConfig c = config({});
    CHECK(c.grid == 10);
    CHECK(c.ghk_draws == 512);
    CHECK(c.workers >= 1);
    CHECK(c.decomp_order == kDefaultOrder);
    CHECK(c.fz == Composition::selected);
  }
  SUBCASE("lists and enumerations") {
    const RunConfig c = config({{"zero", "ywyh,rho_dwdh"},
                                {"fz", "population"},
                                {"decomp_order", "rho_ywyh,structural,selection,composition"}});
    CHECK(c.zero == std::vector<Rho>{Rho::ywyh, Rho::dwdh});
    CHECK(c.fz == Composition::population);
    CHECK(c.decomp_order.front() == Block::sorting);
  }
  SUBCASE("errors name the key") {
    auto message = [](const ConfigMap& m) {
      try {
        config(m);
      } catch (const std::invalid_argument& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    CHECK(message({{"grdi", "4"}}).find("unknown config key 'grdi'") != std::string::npos);
    CHECK(message({{"grid", "four"}}).find("grid") != std::string::npos);
    CHECK(message({{"grid", "1"}}).find("grid") != std::string::npos);
    CHECK(message({{"fz", "all"}}).find("fz") != std::string::npos);
    CHECK(message({{"decomp_order", "selection,selection,structural,composition"}}).find("decomp_order") !=
          std::string::npos);
    CHECK(message({{"statistic", "cell:11,1"}}).find("statistic") != std::string::npos);
    CHECK(message({{"seed", "-1"}}).find("seed") != std::string::npos);
  }
  SUBCASE("statistics") {
    CHECK(parse_statistic("cell:1,10", 10, 1000, 0).label() == "cell_1_10");
    CHECK(parse_statistic("diag", 10, 1000, 0).label() == "diag_sum");
    CHECK(parse_statistic("ratio", 10, 1000, 0).inequality.couples == 1000);
  }
}

TEST_CASE("JSON schema round-trips fits and tables") {
  const SimulatedSample sim = simulate(acceptance_dgp(4000, 31));
  const SelectionSample sample(sim.data, {});
  GridOptions go;
  go.stage.draws = 128;
  const ModelGridFit fit = fit_grid(sample, selected_grid(sample, 3), go);
  const PeriodModel pm = make_period_model(sim.data, fit);

  // Serialize, print and parse, as the files do.
  const PeriodModel back = period_from_json(nlohmann::json::parse(to_json(pm).dump(2)));
  CHECK(back.fit.period == fit.period);
  CHECK(same_bits(back.fit.first.gamma_w, fit.first.gamma_w));
  CHECK(same_bits(back.fit.first.vcov, fit.first.vcov));
  CHECK(back.fit.first.rho == fit.first.rho);
  CHECK(same_bits(back.fit.grid.cuts_h, fit.grid.cuts_h));
  CHECK(back.fit.wage_cols_w == fit.wage_cols_w);
  REQUIRE(back.fit.cells.size() == fit.cells.size());
  for (std::size_t i = 0; i < fit.cells.size(); ++i) {
    const CellFit &a = fit.cells[i], &b = back.fit.cells[i];
    CHECK(a.kind == b.kind);
    CHECK(same_bits(a.params.beta_w, b.params.beta_w));
    CHECK(same_bits(a.params.beta_h, b.params.beta_h));
    for (Rho r : kAllRhos) CHECK(std::bit_cast<std::uint64_t>(a.params[r]) == std::bit_cast<std::uint64_t>(b.params[r]));
    // NaN standard errors of fixed parameters come back as NaN.
    REQUIRE(a.se.size() == b.se.size());
    for (Eigen::Index j = 0; j < a.se.size(); ++j)
      CHECK((std::isnan(a.se(j)) ? std::isnan(b.se(j)) : a.se(j) == b.se(j)));
    CHECK(a.flags == b.flags);
  }
  CHECK(same_bits(back.selected.rows, pm.selected.rows));
  CHECK(same_bits(back.population.weights, pm.population.weights));
  CHECK(back.max_w == pm.max_w);

  CounterfactualOptions opts;
  opts.draws = 512;
  const SortingTable t = fitted_sorting_table(pm, opts);
  const SortingTable tb = table_from_json(nlohmann::json::parse(to_json(t).dump()));
  CHECK(same_bits(t.cells, tb.cells));
  CHECK(same_bits(t.se, tb.se));
  CHECK(t.kendall_tau == tb.kendall_tau);
  CHECK(tb.source == TableSource::model);

  // The same table through the long CSV.
  const fs::path dir = scratch("table_csv");
  {
    std::ofstream out(dir / "t.csv");
    out << kTableCsvHeader << '\n';
    append_table_csv(out, 7, "model", t);
  }
  const auto rows = read_table_csv((dir / "t.csv").string());
  REQUIRE(rows.size() == 9);
  for (const auto& r : rows) {
    CHECK(r.period == 7);
    CHECK(r.cell == t.cells(r.row - 1, r.col - 1));
    CHECK(r.mass == t.mass(r.row - 1, r.col - 1));
    CHECK(r.se == t.se(r.row - 1, r.col - 1));
  }
}

TEST_CASE("estimate at grid 2 on 1k rows" * doctest::timeout(120)) {
  const fs::path dir = scratch("smoke");
  run_simulate(config({{"n", "1000"}, {"seed", "3"}, {"out", dir.string()}}));
  run_estimate(config({{"input", (dir / "households.csv").string()}, {"x", "educ"}, {"z", "kids,young_child"},
                       {"grid", "2"}, {"out", dir.string()}, {"eval_draws", "512"}}));
  for (const char* f : {"fit.json", "cells.csv", "tables.csv", "summary.csv", "rho_density.csv",
                        "data_report.json", "metadata.json"})
    CHECK(fs::exists(dir / f));
  // Every emitted table row parses back and matches the JSON values.
  const auto rows = read_table_csv((dir / "tables.csv").string());
  // Empirical deciles, plus the 2x2 model table unless a whole marginal row is flagged.
  CHECK((rows.size() == 100 || rows.size() == 104));
  const auto models = load_fit((dir / "fit.json").string());
  REQUIRE(models.size() == 1);
  CHECK(models[0].fit.size() == 2);
  // Quantiles need at least two cutoffs.
  CHECK_THROWS_AS(run_counterfactual(config({{"out", dir.string()}})), std::invalid_argument);
}

TEST_CASE("missing upstream fits and periods are named errors") {
  const fs::path dir = scratch("missing");
  try {
    run_counterfactual(config({{"out", dir.string()}}));
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("fit.json' not found") != std::string::npos);
  }
  CHECK_THROWS_AS(run_decompose(config({{"fit", (dir / "nope.json").string()}})), std::invalid_argument);
  CHECK_THROWS_AS(run_estimate(config({{"out", dir.string()}})), std::invalid_argument);
  CHECK_THROWS_AS(run_bootstrap(config({{"out", dir.string()}, {"input", "x.csv"}})), std::invalid_argument);
}

TEST_CASE("simulate, estimate, counterfactual reproduces the fitted table" * doctest::timeout(900)) {
  const fs::path dir = scratch("chain");
  run_simulate(config({{"n", "30000"}, {"seed", "3"}, {"out", dir.string()}}));
  ConfigMap est = read_config((dir / "households.ini").string());
  est.insert({{"grid", "4"}, {"table_size", "4"}, {"compute_se", "false"}, {"eval_draws", "2048"},
              {"out", dir.string()}});
  run_estimate(config(est));
  run_counterfactual(config({{"out", dir.string()}, {"table_size", "4"}, {"eval_draws", "2048"}}));

  std::map<std::pair<int, int>, TableCsvRow> fitted;
  for (const auto& r : read_table_csv((dir / "tables.csv").string()))
    if (r.source == "model") fitted[{r.row, r.col}] = r;
  const auto own = read_table_csv((dir / "cf_table.csv").string());
  REQUIRE(own.size() == 16);
  REQUIRE(fitted.size() == 16);
  for (const auto& r : own) {
    CAPTURE(r.row);
    CAPTURE(r.col);
    const TableCsvRow& f = fitted.at({r.row, r.col});
    CHECK(std::fabs(r.cell - f.cell) <= 3 * std::hypot(r.se, f.se));
  }
  const auto cf = read_json((dir / "counterfactual.json").string());
  CHECK(cf.at("spec") == "q=0 r=0 s=0");
  for (const auto& q : cf.at("quantiles")) CHECK(std::fabs(q.at("cdf").get<double>() - q.at("tau").get<double>()) < 1e-3);
}

TEST_CASE("decompose emits a five-series path that sums to the total" * doctest::timeout(900)) {
  const fs::path dir = scratch("decompose");
  run_simulate(config({{"preset", "cps_like"}, {"n", "3000"}, {"seed", "8"}, {"out", dir.string()}}));
  ConfigMap est = read_config((dir / "households.ini").string());
  est.insert({{"grid", "3"}, {"compute_se", "false"}, {"eval_draws", "256"}, {"out", dir.string()}});
  run_estimate(config(est));
  const ConfigMap dec = {{"out", dir.string()}, {"statistic", "diag"}, {"table_size", "5"}, {"eval_draws", "256"}};
  run_decompose(config(dec));

  std::ifstream in(dir / "decomposition.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "period,series,value");
  std::map<int, std::map<std::string, double>> series;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string p, name, v;
    std::getline(ls, p, ',');
    std::getline(ls, name, ',');
    std::getline(ls, v, ',');
    series[std::stoi(p)][name] = parse_double(v);
  }
  REQUIRE(series.size() == 2);
  for (const auto& [period, s] : series) {
    CAPTURE(period);
    REQUIRE(s.size() == 5);
    const double sum = s.at("composition") + s.at("selection") + s.at("structural") + s.at("rho_ywyh");
    CHECK(std::fabs(sum - s.at("total")) <= 1e-12 * std::max(1.0, std::fabs(s.at("total"))));
  }
  CHECK(series.at(0).at("total") == 0.0);
  CHECK(series.at(1).at("total") != 0.0);

  SUBCASE("reruns are byte-identical") {
    const fs::path again = scratch("decompose_again");
    ConfigMap dec2 = dec;
    dec2["out"] = again.string();
    dec2["fit"] = (dir / "fit.json").string();
    run_decompose(config(dec2));
    CHECK(slurp(dir / "decomposition.csv") == slurp(again / "decomposition.csv"));
    CHECK(slurp(dir / "decomposition.json") == slurp(again / "decomposition.json"));
  }
}

TEST_CASE("pipeline reruns are byte-identical across worker counts" * doctest::timeout(600)) {
  const fs::path data = scratch("rerun_data");
  run_simulate(config({{"n", "4000"}, {"seed", "12"}, {"out", data.string()}}));
  const ConfigMap mapping = read_config((data / "households.ini").string());
  std::map<std::string, std::string> first;
  for (const char* workers : {"1", "2"}) {
    const fs::path dir = scratch(std::string("rerun_") + workers);
    ConfigMap est = mapping;
    est.insert({{"grid", "3"}, {"eval_draws", "512"}, {"ghk_draws", "128"}, {"workers", workers},
                {"out", dir.string()}});
    run_estimate(config(est));
    run_counterfactual(config({{"out", dir.string()}, {"eval_draws", "512"}, {"table_size", "5"},
                               {"inequality", "true"}, {"couples", "5000"}, {"workers", workers}}));
    const auto files = results(dir);
    CHECK(files.size() == 10);
    if (first.empty()) {
      first = files;
    } else {
      for (const auto& [name, bytes] : files) {
        CAPTURE(name);
        CHECK(bytes == first.at(name));
      }
    }
  }
}
