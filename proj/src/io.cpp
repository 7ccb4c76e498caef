#include "sortsel/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace sortsel {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string unquote(std::string s) {
  s = trim(s);
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\'')))
    s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(unquote(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool missing(const std::string& f) { return f.empty() || f == "NA" || f == "na" || f == "."; }

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& field) {
  const std::string f = trim(field);
  double v = 0.0;
  const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
  if (f.empty() || res.ec != std::errc() || res.ptr != f.data() + f.size())
    throw std::invalid_argument("'" + field + "' is not a number");
  return v;
}

// ---------------------------------------------------------------------------
// Households.

HouseholdData read_households(const std::vector<std::string>& paths, const ColumnMapping& m,
                              IngestReport* report) {
  if (paths.empty()) throw IngestError("no input files given");
  struct Raw {
    double d_w, d_h, y_w, y_h, weight;
    int period;
    std::vector<double> x, z;
  };
  std::vector<Raw> rows;
  std::vector<std::string> first_header;
  int dropped = 0;

  for (const std::string& path : paths) {
    std::ifstream in(path);
    if (!in) throw IngestError(path + ": cannot open file");
    std::string line;
    if (!std::getline(in, line)) throw IngestError(path + ": empty file");
    const std::vector<std::string> header = split_fields(line);
    if (first_header.empty()) {
      first_header = header;
    } else if (header != first_header) {
      throw IngestError(path + ": header differs from " + paths.front());
    }
    std::map<std::string, int> col;
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (!col.emplace(header[i], static_cast<int>(i)).second)
        throw IngestError(path + ": duplicate column '" + header[i] + "'");
    }
    std::vector<std::string> mapped = {m.d_w, m.d_h, m.y_w, m.y_h};
    if (!m.weight.empty()) mapped.push_back(m.weight);
    if (!m.period.empty()) mapped.push_back(m.period);
    mapped.insert(mapped.end(), m.x.begin(), m.x.end());
    mapped.insert(mapped.end(), m.z_only.begin(), m.z_only.end());
    for (const std::string& name : mapped)
      if (!col.count(name)) throw IngestError(path + ": mapped column '" + name + "' not in header");
    for (const std::string& name : header)
      if (std::find(mapped.begin(), mapped.end(), name) == mapped.end())
        throw IngestError(path + ": column '" + name + "' is not mapped; list it under x or z_only");

    int row_no = 0;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      ++row_no;
      const std::string at = path + " row " + std::to_string(row_no) + ": ";
      const std::vector<std::string> f = split_fields(line);
      if (f.size() != header.size())
        throw IngestError(at + "expected " + std::to_string(header.size()) + " fields, found " +
                          std::to_string(f.size()));
      auto number = [&](const std::string& name) {
        const std::string& s = f[static_cast<std::size_t>(col.at(name))];
        double v = 0.0;
        try {
          v = parse_double(s);
        } catch (const std::invalid_argument&) {
          throw IngestError(at + name + " = '" + s + "' is not numeric");
        }
        if (!std::isfinite(v)) throw IngestError(at + name + " is not finite");
        return v;
      };
      Raw r{};
      r.d_w = number(m.d_w);
      r.d_h = number(m.d_h);
      for (auto [name, v] : {std::pair{m.d_w, r.d_w}, std::pair{m.d_h, r.d_h}})
        if (v != 0.0 && v != 1.0) throw IngestError(at + name + " must be 0 or 1");
      const bool both = r.d_w == 1.0 && r.d_h == 1.0;
      for (auto [name, slot] : {std::pair{m.y_w, &r.y_w}, std::pair{m.y_h, &r.y_h}}) {
        const std::string& s = f[static_cast<std::size_t>(col.at(name))];
        if (missing(s)) {
          if (both) throw IngestError(at + "both spouses work but " + name + " is missing");
          *slot = kNaN;
          continue;
        }
        const double v = number(name);
        if (both && !(v > 0)) throw IngestError(at + name + " must be positive");
        if (!both) ++dropped;
        *slot = both ? v : kNaN;
      }
      r.weight = m.weight.empty() ? 1.0 : number(m.weight);
      if (r.weight < 0) throw IngestError(at + m.weight + " must be nonnegative");
      if (!m.period.empty()) {
        const double p = number(m.period);
        if (p != std::round(p) || std::fabs(p) > 1e9) throw IngestError(at + m.period + " must be an integer");
        r.period = static_cast<int>(p);
      }
      for (const std::string& name : m.x) r.x.push_back(number(name));
      for (const std::string& name : m.z_only) r.z.push_back(number(name));
      rows.push_back(std::move(r));
    }
  }
  if (rows.empty()) throw IngestError("no data rows in input");

  const auto n = static_cast<Eigen::Index>(rows.size());
  HouseholdData d;
  d.d_w.resize(n);
  d.d_h.resize(n);
  d.y_w.resize(n);
  d.y_h.resize(n);
  d.weight.resize(n);
  d.x.resize(n, static_cast<Eigen::Index>(m.x.size()));
  d.z_only.resize(n, static_cast<Eigen::Index>(m.z_only.size()));
  d.x_names = m.x;
  d.z_only_names = m.z_only;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Raw& r = rows[static_cast<std::size_t>(i)];
    d.d_w(i) = r.d_w;
    d.d_h(i) = r.d_h;
    d.y_w(i) = r.y_w;
    d.y_h(i) = r.y_h;
    d.weight(i) = r.weight;
    d.period.push_back(r.period);
    for (std::size_t c = 0; c < r.x.size(); ++c) d.x(i, static_cast<Eigen::Index>(c)) = r.x[c];
    for (std::size_t c = 0; c < r.z.size(); ++c) d.z_only(i, static_cast<Eigen::Index>(c)) = r.z[c];
  }
  d.validate();
  if (report) {
    *report = describe(d);
    report->wages_dropped = dropped;
  }
  return d;
}

IngestReport describe(const HouseholdData& d) {
  IngestReport rep;
  rep.rows = d.size();
  std::set<int> periods(d.period.begin(), d.period.end());
  for (int p : periods) {
    PeriodReport pr;
    pr.period = p;
    std::vector<double> yw, yh;
    for (int i = 0; i < d.size(); ++i) {
      if (d.period[static_cast<std::size_t>(i)] != p) continue;
      ++pr.rows;
      if (d.works(i)) {
        yw.push_back(d.y_w(i));
        yh.push_back(d.y_h(i));
      }
    }
    pr.working = static_cast<int>(yw.size());
    rep.working += pr.working;
    if (pr.working >= 10) {
      const Eigen::Map<const Vec> w(yw.data(), static_cast<Eigen::Index>(yw.size()));
      const Eigen::Map<const Vec> h(yh.data(), static_cast<Eigen::Index>(yh.size()));
      pr.deciles_w.resize(9);
      pr.deciles_h.resize(9);
      for (int k = 1; k < 10; ++k) {
        pr.deciles_w(k - 1) = empirical_quantile(w, k / 10.0);
        pr.deciles_h(k - 1) = empirical_quantile(h, k / 10.0);
      }
    }
    rep.periods.push_back(std::move(pr));
  }
  return rep;
}

void write_households(const std::string& path, const HouseholdData& d) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << "d_w,d_h,y_w,y_h,weight,period";
  for (const auto& n : d.x_names) out << ',' << n;
  for (const auto& n : d.z_only_names) out << ',' << n;
  out << '\n';
  auto wage = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
  for (int i = 0; i < d.size(); ++i) {
    out << format_double(d.d_w(i)) << ',' << format_double(d.d_h(i)) << ',' << wage(d.y_w(i)) << ','
        << wage(d.y_h(i)) << ',' << format_double(d.weight(i)) << ',' << d.period[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < d.x.cols(); ++c) out << ',' << format_double(d.x(i, c));
    for (Eigen::Index c = 0; c < d.z_only.cols(); ++c) out << ',' << format_double(d.z_only(i, c));
    out << '\n';
  }
}

void write_latent(const std::string& path, const LatentTruth& t) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << "row,latent_y_w,latent_y_h,index_w,index_h\n";
  for (Eigen::Index i = 0; i < t.y_w.size(); ++i)
    out << i + 1 << ',' << format_double(t.y_w(i)) << ',' << format_double(t.y_h(i)) << ','
        << format_double(t.index_w(i)) << ',' << format_double(t.index_h(i)) << '\n';
}

void apply_period_bins(HouseholdData& d, const std::string& spec) {
  const std::string s = trim(spec);
  if (s.empty()) return;
  std::vector<std::pair<int, int>> bins;
  auto to_int = [&](const std::string& t) {
    const double v = parse_double(t);
    if (v != std::round(v)) throw IngestError("period bins: '" + t + "' is not an integer");
    return static_cast<int>(v);
  };
  if (s.find_first_of(",-", 1) == std::string::npos) {
    const int width = to_int(s);
    if (width < 1) throw IngestError("period bins: width must be positive");
    const int lo = *std::min_element(d.period.begin(), d.period.end());
    const int hi = *std::max_element(d.period.begin(), d.period.end());
    for (int b = lo; b <= hi; b += width) bins.emplace_back(b, b + width - 1);
  } else {
    for (const std::string& item : split_list(s)) {
      const auto dash = item.find('-', 1);
      if (dash == std::string::npos) throw IngestError("period bins: '" + item + "' is not a range lo-hi");
      const int lo = to_int(item.substr(0, dash)), hi = to_int(item.substr(dash + 1));
      if (hi < lo) throw IngestError("period bins: empty range '" + item + "'");
      bins.emplace_back(lo, hi);
    }
  }
  for (int& p : d.period) {
    int label = 0, hits = 0;
    for (const auto& [lo, hi] : bins)
      if (p >= lo && p <= hi) {
        label = lo;
        ++hits;
      }
    if (hits != 1)
      throw IngestError("period bins: period " + std::to_string(p) +
                        (hits == 0 ? " is in no bin" : " is in more than one bin"));
    p = label;
  }
}

// ---------------------------------------------------------------------------
// Configuration.

ConfigMap read_config(const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw std::invalid_argument("config: " + std::string(e.what()));
  }
  ConfigMap out;
  auto put = [&](const std::string& key, const std::string& value) {
    if (!out.emplace(key, unquote(value)).second)
      throw std::invalid_argument("config " + path + ": key '" + key + "' given twice");
  };
  for (const auto& [key, node] : tree) {
    if (node.empty()) {
      put(key, node.data());
    } else {
      for (const auto& [inner, leaf] : node) put(inner, leaf.data());
    }
  }
  return out;
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string s = trim(value);
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = unquote(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON.

namespace {

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double get_num(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

Vec vec_from(const json& j) {
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = get_num(j[i]);
  return v;
}

json mat_json(const Mat& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(vec_json(m.row(r).transpose()));
  return a;
}

Mat mat_from(const json& j) {
  if (j.empty()) return Mat();
  Mat m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j[0].size()));
  for (std::size_t r = 0; r < j.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = vec_from(j[r]).transpose();
  return m;
}

CellKind parse_kind(const std::string& s) {
  for (CellKind k : {CellKind::full, CellKind::marginal_w, CellKind::marginal_h, CellKind::trivial})
    if (cell_kind_name(k) == s) return k;
  throw std::invalid_argument("unknown cell kind '" + s + "'");
}

TableSource parse_source(const std::string& s) {
  for (TableSource t : {TableSource::empirical, TableSource::model, TableSource::counterfactual})
    if (table_source_name(t) == s) return t;
  throw std::invalid_argument("unknown table source '" + s + "'");
}

json covariates_json(const CovariateSample& c) {
  return {{"rows", mat_json(c.rows)}, {"weights", vec_json(c.weights)}};
}

CovariateSample covariates_from(const json& j) { return {mat_from(j.at("rows")), vec_from(j.at("weights"))}; }

}  // namespace

json to_json(const ModelGridFit& fit) {
  json first = {{"gamma_w", vec_json(fit.first.gamma_w)},
                {"gamma_h", vec_json(fit.first.gamma_h)},
                {"rho", num(fit.first.rho)},
                {"rho_se", num(fit.first.rho_se)},
                {"loglik", num(fit.first.loglik)},
                {"vcov", mat_json(fit.first.vcov)},
                {"converged", fit.first.converged},
                {"rho_fixed", fit.first.rho_fixed},
                {"iterations", fit.first.iterations}};
  json cells = json::array();
  for (const CellFit& c : fit.cells) {
    json rho = json::object();
    for (Rho r : kAllRhos) rho[rho_name(r)] = num(c.params[r]);
    cells.push_back({{"k", c.params.cell_w},
                     {"l", c.params.cell_h},
                     {"kind", cell_kind_name(c.kind)},
                     {"beta_w", vec_json(c.params.beta_w)},
                     {"beta_h", vec_json(c.params.beta_h)},
                     {"rho", rho},
                     {"se", vec_json(c.se)},
                     {"loglik", num(c.loglik)},
                     {"converged", c.converged},
                     {"flagged", c.flagged},
                     {"flags", c.flags},
                     {"iterations", c.iterations},
                     {"grad_norm", num(c.grad_norm)}});
  }
  return {{"period", fit.period},
          {"first_stage", first},
          {"grid",
           {{"size", fit.grid.size},
            {"levels", vec_json(fit.grid.levels)},
            {"cuts_w", vec_json(fit.grid.cuts_w)},
            {"cuts_h", vec_json(fit.grid.cuts_h)}}},
          {"participation_names", fit.participation_names},
          {"wage_names_w", fit.wage_names_w},
          {"wage_names_h", fit.wage_names_h},
          {"wage_cols_w", fit.wage_cols_w},
          {"wage_cols_h", fit.wage_cols_h},
          {"cells", cells}};
}

ModelGridFit fit_from_json(const json& j) {
  ModelGridFit fit;
  fit.period = j.at("period").get<int>();
  const json& f = j.at("first_stage");
  fit.first.gamma_w = vec_from(f.at("gamma_w"));
  fit.first.gamma_h = vec_from(f.at("gamma_h"));
  fit.first.rho = get_num(f.at("rho"));
  fit.first.rho_se = get_num(f.at("rho_se"));
  fit.first.loglik = get_num(f.at("loglik"));
  fit.first.vcov = mat_from(f.at("vcov"));
  fit.first.converged = f.at("converged").get<bool>();
  fit.first.rho_fixed = f.at("rho_fixed").get<bool>();
  fit.first.iterations = f.at("iterations").get<int>();
  const json& g = j.at("grid");
  fit.grid.size = g.at("size").get<int>();
  fit.grid.levels = vec_from(g.at("levels"));
  fit.grid.cuts_w = vec_from(g.at("cuts_w"));
  fit.grid.cuts_h = vec_from(g.at("cuts_h"));
  fit.participation_names = j.at("participation_names").get<std::vector<std::string>>();
  fit.wage_names_w = j.at("wage_names_w").get<std::vector<std::string>>();
  fit.wage_names_h = j.at("wage_names_h").get<std::vector<std::string>>();
  fit.wage_cols_w = j.at("wage_cols_w").get<std::vector<int>>();
  fit.wage_cols_h = j.at("wage_cols_h").get<std::vector<int>>();
  for (const json& c : j.at("cells")) {
    CellFit cell;
    cell.kind = parse_kind(c.at("kind").get<std::string>());
    cell.params.cell_w = c.at("k").get<int>();
    cell.params.cell_h = c.at("l").get<int>();
    cell.params.beta_w = vec_from(c.at("beta_w"));
    cell.params.beta_h = vec_from(c.at("beta_h"));
    for (Rho r : kAllRhos) cell.params[r] = get_num(c.at("rho").at(rho_name(r)));
    cell.se = vec_from(c.at("se"));
    cell.loglik = get_num(c.at("loglik"));
    cell.converged = c.at("converged").get<bool>();
    cell.flagged = c.at("flagged").get<bool>();
    cell.flags = c.at("flags").get<std::vector<std::string>>();
    cell.iterations = c.at("iterations").get<int>();
    cell.grad_norm = get_num(c.at("grad_norm"));
    fit.cells.push_back(std::move(cell));
  }
  if (fit.cells.size() != static_cast<std::size_t>(fit.grid.size * fit.grid.size))
    throw std::invalid_argument("fit for period " + std::to_string(fit.period) + " has the wrong number of cells");
  return fit;
}

json to_json(const PeriodModel& p) {
  return {{"fit", to_json(p.fit)},
          {"selected", covariates_json(p.selected)},
          {"population", covariates_json(p.population)},
          {"wage_range", {{"min_w", p.min_w}, {"max_w", p.max_w}, {"min_h", p.min_h}, {"max_h", p.max_h}}}};
}

PeriodModel period_from_json(const json& j) {
  PeriodModel p;
  p.fit = fit_from_json(j.at("fit"));
  p.selected = covariates_from(j.at("selected"));
  p.population = covariates_from(j.at("population"));
  const json& r = j.at("wage_range");
  p.min_w = r.at("min_w").get<double>();
  p.max_w = r.at("max_w").get<double>();
  p.min_h = r.at("min_h").get<double>();
  p.max_h = r.at("max_h").get<double>();
  return p;
}

json to_json(const SortingTable& t) {
  return {{"source", table_source_name(t.source)},
          {"size", t.size()},
          {"cells", mat_json(t.cells)},
          {"mass", mat_json(t.mass)},
          {"se", mat_json(t.se)},
          {"diag_sum", num(t.diag_sum)},
          {"kendall_tau", num(t.kendall_tau)},
          {"grouped_tau", num(t.grouped_tau)},
          {"thresholds_w", vec_json(t.thresholds_w)},
          {"thresholds_h", vec_json(t.thresholds_h)},
          {"projections", t.projections},
          {"imputed_cells", t.imputed_cells},
          {"notes", t.notes}};
}

SortingTable table_from_json(const json& j) {
  SortingTable t;
  t.source = parse_source(j.at("source").get<std::string>());
  t.cells = mat_from(j.at("cells"));
  t.mass = mat_from(j.at("mass"));
  t.se = mat_from(j.at("se"));
  t.diag_sum = get_num(j.at("diag_sum"));
  t.kendall_tau = get_num(j.at("kendall_tau"));
  t.grouped_tau = get_num(j.at("grouped_tau"));
  t.thresholds_w = vec_from(j.at("thresholds_w"));
  t.thresholds_h = vec_from(j.at("thresholds_h"));
  t.projections = j.at("projections").get<int>();
  t.imputed_cells = j.at("imputed_cells").get<int>();
  t.notes = j.at("notes").get<std::vector<std::string>>();
  return t;
}

json to_json(const DecompositionPath& path) {
  json order = json::array();
  for (Block b : path.order) order.push_back(block_name(b));
  json rows = json::array();
  for (const DecompositionRow& r : path.rows) {
    json comp = json::object();
    for (Block b : kDefaultOrder) comp[block_name(b)] = num(r.component[static_cast<std::size_t>(b)]);
    rows.push_back({{"period", r.period},
                    {"base_value", num(r.base_value)},
                    {"value", num(r.value)},
                    {"total", num(r.total)},
                    {"components", comp},
                    {"notes", r.notes}});
  }
  return {{"base", path.base}, {"order", order}, {"statistic", path.statistic}, {"rows", rows}};
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot write");
  out << j.dump(2) << '\n';
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument(path + ": cannot open file");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

void append_table_csv(std::ostream& out, int period, const std::string& source, const SortingTable& t) {
  for (int k = 0; k < t.size(); ++k)
    for (int l = 0; l < t.size(); ++l) {
      out << period << ',' << source << ',' << k + 1 << ',' << l + 1 << ',' << format_double(t.cells(k, l))
          << ',' << format_double(t.mass(k, l)) << ',';
      if (t.se.size() > 0) out << format_double(t.se(k, l));
      out << '\n';
    }
}

}  // namespace sortsel
