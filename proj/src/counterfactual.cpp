#include "sortsel/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "sortsel/parallel.hpp"
#include "sortsel/rows.hpp"

namespace sortsel {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// ---------------------------------------------------------------------------
// Kendall tau helpers.

// Pairs tied within runs of equal values of an already sorted sequence.
template <class Eq>
long double tied_pairs(std::size_t n, Eq equal) {
  long double ties = 0;
  std::size_t run = 1;
  for (std::size_t i = 1; i <= n; ++i) {
    if (i < n && equal(i - 1, i)) {
      ++run;
    } else {
      ties += static_cast<long double>(run) * (run - 1) / 2;
      run = 1;
    }
  }
  return ties;
}

// Stable merge sort counting strict inversions.
long double sort_count_swaps(std::vector<double>& v) {
  std::vector<double> buf(v.size());
  long double swaps = 0;
  for (std::size_t width = 1; width < v.size(); width *= 2) {
    for (std::size_t lo = 0; lo < v.size(); lo += 2 * width) {
      const std::size_t mid = std::min(lo + width, v.size());
      const std::size_t hi = std::min(lo + 2 * width, v.size());
      std::size_t i = lo, j = mid, k = lo;
      while (i < mid && j < hi) {
        if (v[j] < v[i]) {
          swaps += static_cast<long double>(mid - i);
          buf[k++] = v[j++];
        } else {
          buf[k++] = v[i++];
        }
      }
      while (i < mid) buf[k++] = v[i++];
      while (j < hi) buf[k++] = v[j++];
    }
    v.swap(buf);
  }
  return swaps;
}

// Midranks (1-based, ties averaged).
Vec midranks(const Vec& y) {
  const Eigen::Index n = y.size();
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return y(a) < y(b); });
  Vec r(n);
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j + 1 < n && y(idx[j + 1]) == y(idx[i])) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (Eigen::Index k = i; k <= j; ++k) r(idx[k]) = mid;
    i = j + 1;
  }
  return r;
}

void require_finite(const Vec& v, const char* what) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v(i)))
      throw std::invalid_argument(std::string(what) + " has a non-finite entry at " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------
// Interpolation on a log-wage lattice.

struct Segment {
  int lo = 0, hi = 0;
  double t = 0.0;  // unclamped; outside [0, 1] beyond the outer knots
  double clamped() const { return std::clamp(t, 0.0, 1.0); }
};

Segment locate(const Vec& knots, double v) {
  const int n = static_cast<int>(knots.size());
  if (n == 1) return {0, 0, 0.0};
  const auto it = std::upper_bound(knots.data(), knots.data() + n, v);
  const int i = std::clamp(static_cast<int>(it - knots.data()) - 1, 0, n - 2);
  return {i, i + 1, (v - knots(i)) / (knots(i + 1) - knots(i))};
}

double along(const Vec& values, const Segment& s) {
  return (1.0 - s.t) * values(s.lo) + s.t * values(s.hi);
}

double open_uniform(std::mt19937_64& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

const PeriodModel& find_period(const std::vector<PeriodModel>& periods, int p) {
  for (const PeriodModel& m : periods)
    if (m.period() == p) return m;
  throw std::invalid_argument("no fitted model for period " + std::to_string(p));
}

bool zeroes(const CounterfactualSpec& spec, Rho r) {
  return std::find(spec.zero.begin(), spec.zero.end(), r) != spec.zero.end();
}

}  // namespace

// ---------------------------------------------------------------------------
// Kendall tau.

double kendall_tau_b(const Vec& x, const Vec& y) {
  if (x.size() != y.size()) throw std::invalid_argument("kendall_tau_b: size mismatch");
  if (x.size() < 2) throw std::invalid_argument("kendall_tau_b: need at least two pairs");
  require_finite(x, "kendall_tau_b: x");
  require_finite(y, "kendall_tau_b: y");
  const std::size_t n = static_cast<std::size_t>(x.size());
  std::vector<Eigen::Index> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) {
    return x(a) < x(b) || (x(a) == x(b) && y(a) < y(b));
  });
  const long double n0 = static_cast<long double>(n) * (n - 1) / 2;
  const long double n1 = tied_pairs(n, [&](std::size_t a, std::size_t b) { return x(idx[a]) == x(idx[b]); });
  const long double n3 = tied_pairs(n, [&](std::size_t a, std::size_t b) {
    return x(idx[a]) == x(idx[b]) && y(idx[a]) == y(idx[b]);
  });
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y(idx[i]);
  const long double swaps = sort_count_swaps(ys);
  const long double n2 = tied_pairs(n, [&](std::size_t a, std::size_t b) { return ys[a] == ys[b]; });
  const long double denom = std::sqrt((n0 - n1) * (n0 - n2));
  if (denom == 0) return std::numeric_limits<double>::quiet_NaN();
  return static_cast<double>((n0 - n1 - n2 + n3 - 2 * swaps) / denom);
}

double kendall_tau_b(const Mat& table) {
  if (table.size() == 0 || (table.array() < 0).any() || !table.allFinite())
    throw std::invalid_argument("kendall_tau_b: table must be nonempty, finite and nonnegative");
  const double total = table.sum();
  if (!(total > 0)) throw std::invalid_argument("kendall_tau_b: table has no mass");
  const Mat p = table / total;
  const Eigen::Index rows = p.rows(), cols = p.cols();
  double concordant = 0, discordant = 0;
  for (Eigen::Index k = 0; k < rows; ++k)
    for (Eigen::Index l = 0; l < cols; ++l) {
      if (p(k, l) == 0) continue;
      for (Eigen::Index k2 = k + 1; k2 < rows; ++k2) {
        concordant += p(k, l) * p.row(k2).tail(cols - l - 1).sum();
        discordant += p(k, l) * p.row(k2).head(l).sum();
      }
    }
  const double row_ties = p.rowwise().sum().squaredNorm();
  const double col_ties = p.colwise().sum().squaredNorm();
  const double denom = std::sqrt((1 - row_ties) * (1 - col_ties));
  if (denom == 0) return std::numeric_limits<double>::quiet_NaN();
  return 2 * (concordant - discordant) / denom;
}

// ---------------------------------------------------------------------------
// Tables.

std::string table_source_name(TableSource s) {
  switch (s) {
    case TableSource::empirical: return "empirical";
    case TableSource::model: return "model";
    case TableSource::counterfactual: return "counterfactual";
  }
  return "?";
}

namespace {

void finish_table(SortingTable& t) {
  t.diag_sum = t.cells.trace();
  t.grouped_tau = kendall_tau_b(t.mass);
}

}  // namespace

SortingTable empirical_sorting_table(const Vec& y_w, const Vec& y_h, int size) {
  if (y_w.size() != y_h.size()) throw std::invalid_argument("empirical_sorting_table: size mismatch");
  if (y_w.size() < 100) throw std::invalid_argument("empirical_sorting_table: need at least 100 couples");
  if (size < 2) throw std::invalid_argument("empirical_sorting_table: size must be at least 2");
  require_finite(y_w, "empirical_sorting_table: y_w");
  require_finite(y_h, "empirical_sorting_table: y_h");
  const Eigen::Index n = y_w.size();
  const double nd = static_cast<double>(n);
  const Vec rw = midranks(y_w), rh = midranks(y_h);
  auto bin = [&](double rank) {
    return std::min(size - 1, static_cast<int>(std::floor(size * (rank - 0.5) / nd)));
  };
  SortingTable t;
  t.source = TableSource::empirical;
  Mat counts = Mat::Zero(size, size);
  for (Eigen::Index i = 0; i < n; ++i) counts(bin(rw(i)), bin(rh(i))) += 1.0;
  t.mass = counts / nd;
  t.cells = counts * (static_cast<double>(size * size) / nd);
  t.thresholds_w.resize(size - 1);
  t.thresholds_h.resize(size - 1);
  for (int k = 1; k < size; ++k) {
    t.thresholds_w(k - 1) = empirical_quantile(y_w, static_cast<double>(k) / size);
    t.thresholds_h(k - 1) = empirical_quantile(y_h, static_cast<double>(k) / size);
  }
  finish_table(t);
  t.kendall_tau = kendall_tau_b(y_w, y_h);
  return t;
}

// ---------------------------------------------------------------------------
// Period models.

CovariateSample covariate_sample(const HouseholdData& data, Composition which) {
  const std::vector<int> keep =
      which == Composition::selected ? data.working() : data.rows_where([](int) { return true; });
  if (keep.empty()) throw std::invalid_argument("covariate_sample: no couples to average over");
  const Mat z = participation_design(data);
  Mat rows(static_cast<Eigen::Index>(keep.size()), z.cols());
  Vec w(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t i = 0; i < keep.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = z.row(keep[i]);
    w(static_cast<Eigen::Index>(i)) = data.weight(keep[i]);
  }
  const RowGroups groups = group_rows(rows);
  CovariateSample out;
  out.rows.resize(groups.count(), z.cols());
  for (int g = 0; g < groups.count(); ++g) out.rows.row(g) = rows.row(groups.representative[static_cast<std::size_t>(g)]);
  out.weights = group_totals(groups, w);
  const double total = out.weights.sum();
  if (!(total > 0)) throw std::invalid_argument("covariate_sample: weights sum to zero");
  out.weights /= total;
  return out;
}

PeriodModel make_period_model(const HouseholdData& data, ModelGridFit fit) {
  const std::vector<int> working = data.working();
  if (working.empty()) throw std::invalid_argument("make_period_model: no working couples");
  PeriodModel m;
  m.selected = covariate_sample(data, Composition::selected);
  m.population = covariate_sample(data, Composition::population);
  if (m.selected.rows.cols() != static_cast<Eigen::Index>(fit.participation_names.size()))
    throw std::invalid_argument("make_period_model: data and fit use different participation designs");
  m.min_w = m.min_h = kInf;
  m.max_w = m.max_h = -kInf;
  for (int i : working) {
    m.min_w = std::min(m.min_w, data.y_w(i));
    m.max_w = std::max(m.max_w, data.y_w(i));
    m.min_h = std::min(m.min_h, data.y_h(i));
    m.max_h = std::max(m.max_h, data.y_h(i));
  }
  m.fit = std::move(fit);
  return m;
}

// ---------------------------------------------------------------------------
// Lattice of cell parameters.

struct CounterfactualModel::Lattice {
  Vec log_w, log_h;                 // log interior cutoffs
  std::vector<LocalParams> full;    // (i, j) at i * log_h.size() + j
  std::vector<LocalParams> marg_w;  // cells (i, open)
  std::vector<LocalParams> marg_h;  // cells (open, j)
  int imputed = 0;

  const LocalParams& at(int i, int j) const {
    return full[static_cast<std::size_t>(i * log_h.size() + j)];
  }
};

namespace {

using Lattice = CounterfactualModel::Lattice;

// Nearest usable cell by grid distance; ties go to the lower index.
template <class Usable>
int nearest(int n_i, int n_j, int i, int j, Usable usable) {
  int best = -1, best_dist = std::numeric_limits<int>::max();
  for (int a = 0; a < n_i; ++a)
    for (int b = 0; b < n_j; ++b) {
      if (!usable(a, b)) continue;
      const int d = std::abs(a - i) + std::abs(b - j);
      if (d < best_dist) {
        best = a * n_j + b;
        best_dist = d;
      }
    }
  return best;
}

std::shared_ptr<const Lattice> build_lattice(const ModelGridFit& fit) {
  const int g = fit.size();
  if (g < 2) throw std::invalid_argument("counterfactual: grid size must be at least 2");
  const int n = g - 1;
  auto lat = std::make_shared<Lattice>();
  lat->log_w = fit.grid.cuts_w.array().log();
  lat->log_h = fit.grid.cuts_h.array().log();
  const std::string where = "period " + std::to_string(fit.period) + ": ";

  lat->full.resize(static_cast<std::size_t>(n * n));
  auto full_ok = [&](int a, int b) { return fit.cell(a, b).usable(); };
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const int src = nearest(n, n, i, j, full_ok);
      if (src < 0) throw std::invalid_argument(where + "no usable interior cells");
      if (src != i * n + j) ++lat->imputed;
      lat->full[static_cast<std::size_t>(i * n + j)] = fit.cell(src / n, src % n).params;
    }
  for (int i = 0; i < n; ++i) {
    const int src = nearest(n, 1, i, 0, [&](int a, int) { return fit.cell(a, n).usable(); });
    if (src < 0) throw std::invalid_argument(where + "no usable marginal cells for wives");
    if (src != i) ++lat->imputed;
    lat->marg_w.push_back(fit.cell(src, n).params);
  }
  for (int j = 0; j < n; ++j) {
    const int src = nearest(n, 1, j, 0, [&](int b, int) { return fit.cell(n, b).usable(); });
    if (src < 0) throw std::invalid_argument(where + "no usable marginal cells for husbands");
    if (src != j) ++lat->imputed;
    lat->marg_h.push_back(fit.cell(n, src).params);
  }
  return lat;
}

struct Bilinear {
  Segment w, h;
  // Explicit T: an Eigen expression over the temporaries would dangle.
  template <class T, class Get>
  T blend(Get get, bool clamp) const {
    const double s = clamp ? w.clamped() : w.t;
    const double t = clamp ? h.clamped() : h.t;
    return (1 - s) * (1 - t) * get(w.lo, h.lo) + (1 - s) * t * get(w.lo, h.hi) +
           s * (1 - t) * get(w.hi, h.lo) + s * t * get(w.hi, h.hi);
  }
};

Bilinear locate2(const Lattice& lat, double y_w, double y_h) {
  return {locate(lat.log_w, std::log(y_w)), locate(lat.log_h, std::log(y_h))};
}

double rho_at(const Lattice& lat, double y_w, double y_h, Rho r) {
  return locate2(lat, y_w, y_h).blend<double>([&](int i, int j) { return lat.at(i, j)[r]; }, true);
}

}  // namespace

// ---------------------------------------------------------------------------
// Counterfactual model.

CounterfactualSpec CounterfactualSpec::periods(int q, int r, int s) {
  CounterfactualSpec spec;
  spec.selection = q;
  spec.wage = spec.sorting = r;
  spec.composition = s;
  return spec;
}

std::string CounterfactualSpec::label() const {
  std::ostringstream out;
  out << "q=" << selection << " r=" << wage;
  if (sorting != wage) out << " rho_ywyh=" << sorting;
  out << " s=" << composition;
  if (fz == Composition::population) out << " fz=population";
  for (Rho r : zero) out << " " << rho_name(r) << "=0";
  return out.str();
}

CounterfactualModel::CounterfactualModel(const std::vector<PeriodModel>& periods,
                                         CounterfactualSpec spec, CounterfactualOptions opts)
    : spec_(std::move(spec)), opts_(opts), projections_(std::make_shared<std::atomic<int>>(0)) {
  if (opts_.draws < 1) throw std::invalid_argument("counterfactual: draws must be positive");
  if (!(opts_.quant_tol > 0)) throw std::invalid_argument("counterfactual: quant_tol must be positive");
  const PeriodModel& sel = find_period(periods, spec_.selection);
  const PeriodModel& wage = find_period(periods, spec_.wage);
  const PeriodModel& sort = find_period(periods, spec_.sorting);
  const PeriodModel& comp = find_period(periods, spec_.composition);
  for (const PeriodModel* m : {&wage, &sort, &comp}) {
    if (m->fit.participation_names != sel.fit.participation_names)
      throw std::invalid_argument("counterfactual: periods " + std::to_string(sel.period()) + " and " +
                                  std::to_string(m->period()) + " use different participation designs");
  }

  sel_lat_ = build_lattice(sel.fit);
  wage_lat_ = wage.period() == sel.period() ? sel_lat_ : build_lattice(wage.fit);
  sort_lat_ = sort.period() == sel.period()    ? sel_lat_
              : sort.period() == wage.period() ? wage_lat_
                                               : build_lattice(sort.fit);
  std::set<const Lattice*> distinct = {sel_lat_.get(), wage_lat_.get(), sort_lat_.get()};
  for (const Lattice* l : distinct) imputed_ += l->imputed;

  rho_dd_ = zeroes(spec_, Rho::dwdh) ? 0.0 : sel.fit.first.rho;
  points_ = UniformPointSet(opts_.draws, 3, opts_.seed);
  range_ = {wage.min_w, wage.max_w, wage.min_h, wage.max_h};

  const CovariateSample& z = spec_.fz == Composition::selected ? comp.selected : comp.population;
  const Vec a = z.rows * sel.fit.first.gamma_w;
  const Vec b = z.rows * sel.fit.first.gamma_h;
  for (Eigen::Index g = 0; g < z.rows.rows(); ++g) {
    Row r;
    r.weight = z.weights(g);
    r.a = a(g);
    r.b = b(g);
    r.both = bvn_cdf(r.a, r.b, rho_dd_);
    if (!(r.both > 0)) throw std::invalid_argument("counterfactual: covariate row with zero participation probability");
    r.x_w = z.rows.row(g)(wage.fit.wage_cols_w).transpose();
    r.x_h = z.rows.row(g)(wage.fit.wage_cols_h).transpose();
    // Rearranged so each row's marginal index is nondecreasing in y.
    r.marginal_w.resize(static_cast<Eigen::Index>(wage_lat_->marg_w.size()));
    r.marginal_h.resize(static_cast<Eigen::Index>(wage_lat_->marg_h.size()));
    for (std::size_t i = 0; i < wage_lat_->marg_w.size(); ++i)
      r.marginal_w(static_cast<Eigen::Index>(i)) = r.x_w.dot(wage_lat_->marg_w[i].beta_w);
    for (std::size_t j = 0; j < wage_lat_->marg_h.size(); ++j)
      r.marginal_h(static_cast<Eigen::Index>(j)) = r.x_h.dot(wage_lat_->marg_h[j].beta_h);
    std::sort(r.marginal_w.begin(), r.marginal_w.end());
    std::sort(r.marginal_h.begin(), r.marginal_h.end());
    rows_.push_back(std::move(r));
  }
}

LocalParams CounterfactualModel::joint_params(double y_w, double y_h) const {
  const Bilinear wl = locate2(*wage_lat_, y_w, y_h);
  LocalParams p;
  p.beta_w = wl.blend<Vec>([&](int i, int j) -> const Vec& { return wage_lat_->at(i, j).beta_w; }, false);
  p.beta_h = wl.blend<Vec>([&](int i, int j) -> const Vec& { return wage_lat_->at(i, j).beta_h; }, false);
  for (Rho r : {Rho::dwyw, Rho::dhyh, Rho::dwyh, Rho::dhyw}) p[r] = rho_at(*sel_lat_, y_w, y_h, r);
  p[Rho::ywyh] = rho_at(*sort_lat_, y_w, y_h, Rho::ywyh);
  p[Rho::dwdh] = rho_dd_;
  for (Rho r : spec_.zero) p[r] = 0.0;
  return p;
}

LocalParams CounterfactualModel::marginal_params(Spouse who, double y) const {
  LocalParams p;
  const bool wife = who == Spouse::wife;
  const Vec& knots = wife ? sel_lat_->log_w : sel_lat_->log_h;
  const std::vector<LocalParams>& cells = wife ? sel_lat_->marg_w : sel_lat_->marg_h;
  const Segment s = locate(knots, std::log(y));
  const double t = s.clamped();
  const Rho own = wife ? Rho::dwyw : Rho::dhyh;
  const Rho cross = wife ? Rho::dhyw : Rho::dwyh;
  for (Rho r : {own, cross})
    p[r] = (1 - t) * cells[static_cast<std::size_t>(s.lo)][r] + t * cells[static_cast<std::size_t>(s.hi)][r];
  p[Rho::dwdh] = rho_dd_;
  for (Rho r : spec_.zero) p[r] = 0.0;
  return p;
}

CorrelationMatrix CounterfactualModel::sigma(LocalParams p) const {
  AssembledSigma s = assemble_sigma(p);
  if (s.projected) ++*projections_;
  return std::move(s.corr);
}

int CounterfactualModel::projections() const { return projections_->load(); }

double CounterfactualModel::joint_cdf(double y_w, double y_h, double* se) const {
  if (std::isnan(y_w) || std::isnan(y_h)) throw std::invalid_argument("joint_cdf: NaN wage");
  if (se) *se = 0.0;
  if (y_w <= 0 || y_h <= 0) return 0.0;
  if (std::isinf(y_w) && std::isinf(y_h)) return 1.0;
  if (std::isinf(y_h)) return marginal_cdf(Spouse::wife, y_w, se);
  if (std::isinf(y_w)) return marginal_cdf(Spouse::husband, y_h, se);

  const LocalParams p = joint_params(y_w, y_h);
  const CorrelationMatrix corr = sigma(p);
  double value = 0.0, err = 0.0;
  Vec upper(4);
  for (const Row& r : rows_) {
    upper << r.a, r.b, r.x_w.dot(p.beta_w), r.x_h.dot(p.beta_h);
    const GhkResult g = mvn_cdf_ghk(upper, corr, points_);
    value += r.weight * g.prob / r.both;
    err += r.weight * g.std_error / r.both;
  }
  if (se) *se = err;
  return std::clamp(value, 0.0, 1.0);
}

double CounterfactualModel::marginal_cdf(Spouse who, double y, double* se) const {
  if (std::isnan(y)) throw std::invalid_argument("marginal_cdf: NaN wage");
  if (se) *se = 0.0;
  if (y <= 0) return 0.0;
  if (std::isinf(y)) return 1.0;
  const bool wife = who == Spouse::wife;
  const CorrelationMatrix corr = sigma(marginal_params(who, y));
  const Segment s = locate(wife ? wage_lat_->log_w : wage_lat_->log_h, std::log(y));
  double value = 0.0, err = 0.0;
  Vec upper(4);
  for (const Row& r : rows_) {
    const double index = along(wife ? r.marginal_w : r.marginal_h, s);
    if (wife)
      upper << r.a, r.b, index, kInf;
    else
      upper << r.a, r.b, kInf, index;
    const GhkResult g = mvn_cdf_ghk(upper, corr, points_);
    value += r.weight * g.prob / r.both;
    err += r.weight * g.std_error / r.both;
  }
  if (se) *se = err;
  return std::clamp(value, 0.0, 1.0);
}

std::pair<double, double> CounterfactualModel::bracket(Spouse who) const {
  const double lo = who == Spouse::wife ? range_[0] : range_[2];
  const double hi = who == Spouse::wife ? range_[1] : range_[3];
  const double pad = 0.25 * (hi - lo);
  return {std::max(lo - pad, lo / 4), hi + pad};
}

QuantileResult CounterfactualModel::quantile(Spouse who, double tau) const {
  if (!(tau > 0 && tau < 1)) throw std::invalid_argument("quantile: level must lie in (0, 1)");
  // One cutoff leaves the index flat in y.
  if (wage_lat_->log_w.size() < 2 || wage_lat_->log_h.size() < 2)
    throw std::invalid_argument("quantile: the wage period needs a grid of at least 3 for quantiles");
  auto [lo, hi] = bracket(who);
  const double f_lo = marginal_cdf(who, lo);
  if (f_lo >= tau) return {lo, f_lo, true};
  double f_hi = marginal_cdf(who, hi);
  if (f_hi < tau) return {hi, f_hi, true};
  while (hi - lo > opts_.quant_tol) {
    const double mid = 0.5 * (lo + hi);
    const double f = marginal_cdf(who, mid);
    if (f >= tau) {
      hi = mid;
      f_hi = f;
    } else {
      lo = mid;
    }
  }
  return {hi, f_hi, false};
}

double CounterfactualModel::wage_correlation(double y_w, double y_h) const {
  return joint_params(y_w, y_h)[Rho::ywyh];
}

QuantileResult counterfactual_quantile(const CounterfactualModel& model, Spouse who, double tau) {
  return model.quantile(who, tau);
}

namespace {

// Table from the model's CDF at the given interior cutoffs.
SortingTable table_at(const CounterfactualModel& model, Vec thr_w, Vec thr_h) {
  const int size = static_cast<int>(thr_w.size()) + 1;
  SortingTable t;
  t.thresholds_w = std::move(thr_w);
  t.thresholds_h = std::move(thr_h);
  // Cumulative masses J(k, l) = F(t_w[k-1], t_h[l-1]); index `size` is open.
  Mat cum = Mat::Zero(size + 1, size + 1), cum_se = Mat::Zero(size + 1, size + 1);
  cum(size, size) = 1.0;
  const int inner = size - 1;
  const int tasks = 2 * inner + inner * inner;
  run_parallel(tasks, model.options().workers, [&](int task) {
    double se = 0.0;
    if (task < inner) {
      cum(task + 1, size) = model.marginal_cdf(Spouse::wife, t.thresholds_w(task), &se);
      cum_se(task + 1, size) = se;
    } else if (task < 2 * inner) {
      const int l = task - inner;
      cum(size, l + 1) = model.marginal_cdf(Spouse::husband, t.thresholds_h(l), &se);
      cum_se(size, l + 1) = se;
    } else {
      const int c = task - 2 * inner;
      const int k = c / inner, l = c % inner;
      cum(k + 1, l + 1) = model.joint_cdf(t.thresholds_w(k), t.thresholds_h(l), &se);
      cum_se(k + 1, l + 1) = se;
    }
  });

  t.mass.resize(size, size);
  t.cells.resize(size, size);
  t.se.resize(size, size);
  int clamped = 0;
  for (int k = 0; k < size; ++k)
    for (int l = 0; l < size; ++l) {
      double m = cum(k + 1, l + 1) - cum(k, l + 1) - cum(k + 1, l) + cum(k, l);
      if (m < 0) {
        m = 0;
        ++clamped;
      }
      t.mass(k, l) = m;
    }
  const Vec row = t.mass.rowwise().sum();
  const Vec col = t.mass.colwise().sum().transpose();
  for (int k = 0; k < size; ++k)
    for (int l = 0; l < size; ++l) {
      const double denom = row(k) * col(l);
      const double var = cum_se(k + 1, l + 1) * cum_se(k + 1, l + 1) + cum_se(k, l + 1) * cum_se(k, l + 1) +
                         cum_se(k + 1, l) * cum_se(k + 1, l) + cum_se(k, l) * cum_se(k, l);
      t.cells(k, l) = denom > 0 ? t.mass(k, l) / denom : 0.0;
      t.se(k, l) = denom > 0 ? std::sqrt(var) / denom : 0.0;
    }
  if (clamped > 0) t.notes.push_back(std::to_string(clamped) + " negative cell masses clamped to 0");
  if ((row.array() <= 0).any() || (col.array() <= 0).any())
    t.notes.push_back("empty decile row or column; its cells are set to 0");
  finish_table(t);
  t.kendall_tau = t.grouped_tau;
  const CounterfactualSpec& spec = model.spec();
  const bool own = spec.selection == spec.wage && spec.wage == spec.sorting &&
                   spec.sorting == spec.composition && spec.zero.empty() &&
                   spec.fz == Composition::selected;
  t.source = own ? TableSource::model : TableSource::counterfactual;
  t.projections = model.projections();
  t.imputed_cells = model.imputed_cells();
  if (t.projections > 0)
    t.notes.push_back(std::to_string(t.projections) + " correlation matrices projected to PD");
  if (t.imputed_cells > 0)
    t.notes.push_back(std::to_string(t.imputed_cells) + " flagged grid cells imputed from neighbours");
  return t;
}

}  // namespace

SortingTable CounterfactualModel::sorting_table(int size) const {
  if (size < 2) throw std::invalid_argument("sorting_table: size must be at least 2");
  const int inner = size - 1;
  std::vector<QuantileResult> q(static_cast<std::size_t>(2 * inner));
  run_parallel(2 * inner, opts_.workers, [&](int i) {
    const Spouse who = i < inner ? Spouse::wife : Spouse::husband;
    q[static_cast<std::size_t>(i)] = quantile(who, static_cast<double>(i % inner + 1) / size);
  });
  Vec thr_w(inner), thr_h(inner);
  int boundary = 0;
  for (int k = 0; k < inner; ++k) {
    thr_w(k) = q[static_cast<std::size_t>(k)].value;
    thr_h(k) = q[static_cast<std::size_t>(inner + k)].value;
    boundary += q[static_cast<std::size_t>(k)].boundary + q[static_cast<std::size_t>(inner + k)].boundary;
  }
  std::sort(thr_w.begin(), thr_w.end());
  std::sort(thr_h.begin(), thr_h.end());
  SortingTable t = table_at(*this, std::move(thr_w), std::move(thr_h));
  if (boundary > 0)
    t.notes.push_back(std::to_string(boundary) + " quantiles hit the bisection bracket");
  return t;
}

SortingTable model_sorting_measure(const std::vector<PeriodModel>& periods,
                                   const CounterfactualSpec& spec,
                                   const CounterfactualOptions& opts, int size) {
  return CounterfactualModel(periods, spec, opts).sorting_table(size);
}

SortingTable fitted_sorting_table(const PeriodModel& period, const CounterfactualOptions& opts) {
  const CounterfactualModel model({period}, CounterfactualSpec::own(period.period()), opts);
  return table_at(model, period.fit.grid.cuts_w, period.fit.grid.cuts_h);
}

// ---------------------------------------------------------------------------
// Inequality.

namespace {

void check_levels(double upper, double lower) {
  if (!(lower > 0 && upper < 1 && upper > lower))
    throw std::invalid_argument("inequality_ratio: need 0 < lower < upper < 1");
}

// Rearranged marginal CDF on a log-spaced grid, inverted by linear interpolation.
class QuantileCurve {
 public:
  QuantileCurve(const CounterfactualModel& model, Spouse who, int points) {
    if (points < 2) throw std::invalid_argument("inequality: cdf_points must be at least 2");
    const auto [lo, hi] = model.bracket(who);
    y_.resize(points);
    f_.resize(points);
    for (int i = 0; i < points; ++i) {
      y_(i) = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (points - 1));
      f_(i) = model.marginal_cdf(who, y_(i));
    }
    std::sort(f_.begin(), f_.end());
  }

  double operator()(double u) const {
    const auto it = std::lower_bound(f_.begin(), f_.end(), u);
    if (it == f_.begin()) return y_(0);
    if (it == f_.end()) return y_(y_.size() - 1);
    const Eigen::Index i = it - f_.begin();
    const double span = f_(i) - f_(i - 1);
    const double t = span > 0 ? (u - f_(i - 1)) / span : 1.0;
    return y_(i - 1) + t * (y_(i) - y_(i - 1));
  }

 private:
  Vec y_, f_;
};

}  // namespace

double inequality_ratio(const Vec& y_w, const Vec& y_h, double upper, double lower) {
  check_levels(upper, lower);
  if (y_w.size() != y_h.size() || y_w.size() == 0)
    throw std::invalid_argument("inequality_ratio: need equally sized, nonempty samples");
  const Vec sum = y_w + y_h;
  const double bottom = empirical_quantile(sum, lower);
  if (!(bottom > 0)) throw std::domain_error("inequality_ratio: lower quantile is not positive");
  return empirical_quantile(sum, upper) / bottom;
}

double random_sorting_ratio(const Vec& y_w, const Vec& y_h, std::uint64_t seed, double upper,
                            double lower) {
  Vec shuffled = y_h;
  std::mt19937_64 rng(seed);
  for (Eigen::Index i = shuffled.size() - 1; i > 0; --i) {
    const auto j = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(shuffled(i), shuffled(j));
  }
  return inequality_ratio(y_w, shuffled, upper, lower);
}

SimulatedCouples simulate_couples(const CounterfactualModel& model, const InequalityOptions& opts) {
  if (opts.couples < 1) throw std::invalid_argument("simulate_couples: couples must be positive");
  const SortingTable table = model.sorting_table(opts.table_size);
  const int g = table.size();
  const QuantileCurve q_w(model, Spouse::wife, opts.cdf_points);
  const QuantileCurve q_h(model, Spouse::husband, opts.cdf_points);

  std::vector<double> cum(static_cast<std::size_t>(g * g));
  std::vector<double> rho(cum.size());
  double running = 0.0;
  for (int k = 0; k < g; ++k)
    for (int l = 0; l < g; ++l) {
      const auto c = static_cast<std::size_t>(k * g + l);
      running += table.mass(k, l);
      cum[c] = running;
      const double mid_w = q_w((k + 0.5) / g), mid_h = q_h((l + 0.5) / g);
      rho[c] = std::clamp(model.wage_correlation(mid_w, mid_h), -0.99, 0.99);
    }
  if (!(running > 0)) throw std::invalid_argument("simulate_couples: table has no mass");

  std::mt19937_64 rng(opts.seed);
  SimulatedCouples out{Vec(opts.couples), Vec(opts.couples)};
  const double width = 1.0 / g;
  for (int n = 0; n < opts.couples; ++n) {
    const double pick = open_uniform(rng) * running;
    const auto c = static_cast<int>(std::min<std::ptrdiff_t>(
        std::lower_bound(cum.begin(), cum.end(), pick) - cum.begin(), g * g - 1));
    const int k = c / g, l = c % g;
    const double r = rho[static_cast<std::size_t>(c)];
    const double s = std::sqrt(1 - r * r);
    const double lo_h = normal_quantile_clamped(l * width);
    const double hi_h = normal_quantile_clamped((l + 1) * width);
    // Wife's position by rejection on P(husband in his band | wife), then
    // the husband's from the truncated conditional.
    double u_w = 0.0, u_h = -1.0;
    for (int tries = 0; tries < 10000 && u_h < 0; ++tries) {
      u_w = (k + open_uniform(rng)) * width;
      const double e_w = normal_quantile_clamped(u_w);
      const double p_lo = normal_cdf((lo_h - r * e_w) / s);
      const double p_hi = normal_cdf((hi_h - r * e_w) / s);
      if (open_uniform(rng) >= p_hi - p_lo) continue;
      const double e_h = r * e_w + s * normal_quantile_clamped(p_lo + open_uniform(rng) * (p_hi - p_lo));
      u_h = std::clamp(normal_cdf(e_h), l * width, (l + 1) * width);
    }
    if (u_h < 0) u_h = (l + open_uniform(rng)) * width;
    out.y_w(n) = q_w(u_w);
    out.y_h(n) = q_h(u_h);
  }
  return out;
}

InequalityResult inequality_ratio(const CounterfactualModel& model, const InequalityOptions& opts) {
  check_levels(opts.upper, opts.lower);
  const SimulatedCouples c = simulate_couples(model, opts);
  return {inequality_ratio(c.y_w, c.y_h, opts.upper, opts.lower),
          random_sorting_ratio(c.y_w, c.y_h, mix_seed(opts.seed, 1), opts.upper, opts.lower)};
}

// ---------------------------------------------------------------------------
// Decomposition.

std::string block_name(Block b) {
  switch (b) {
    case Block::composition: return "composition";
    case Block::selection: return "selection";
    case Block::structural: return "structural";
    case Block::sorting: return "rho_ywyh";
  }
  return "?";
}

Block parse_block(const std::string& name) {
  for (Block b : kDefaultOrder)
    if (block_name(b) == name) return b;
  if (name == "sorting") return Block::sorting;
  throw std::invalid_argument("unknown decomposition block '" + name + "'");
}

Statistic Statistic::ratio(double upper, double lower) {
  check_levels(upper, lower);
  Statistic s;
  s.kind = Kind::ratio;
  s.inequality.upper = upper;
  s.inequality.lower = lower;
  return s;
}

std::string Statistic::label() const {
  switch (kind) {
    case Kind::cell: return "cell_" + std::to_string(k + 1) + "_" + std::to_string(l + 1);
    case Kind::diagonal: return "diag_sum";
    case Kind::kendall: return "kendall_tau";
    case Kind::ratio: {
      std::ostringstream out;
      out << "ratio_q" << std::lround(100 * inequality.upper) << "_q" << std::lround(100 * inequality.lower);
      return out.str();
    }
  }
  return "?";
}

double Statistic::evaluate(const CounterfactualModel& model) const {
  if (kind == Kind::ratio) return inequality_ratio(model, inequality).ratio;
  const SortingTable t = model.sorting_table(table_size);
  switch (kind) {
    case Kind::cell:
      if (k < 0 || l < 0 || k >= t.size() || l >= t.size())
        throw std::invalid_argument("statistic: cell index outside the table");
      return t.cells(k, l);
    case Kind::diagonal: return t.diag_sum;
    default: return t.grouped_tau;
  }
}

DecompositionPath decompose(const std::vector<PeriodModel>& periods, int base,
                            const Statistic& statistic, const CounterfactualOptions& opts,
                            const std::vector<Block>& order, Composition fz) {
  if (periods.size() < 2) throw std::invalid_argument("decompose: need at least two periods");
  {
    std::vector<Block> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != kDefaultOrder)
      throw std::invalid_argument("decompose: order must list each block exactly once");
  }
  CounterfactualSpec start = CounterfactualSpec::own(base);
  start.fz = fz;
  const CounterfactualModel base_model(periods, start, opts);
  const double base_value = statistic.evaluate(base_model);

  DecompositionPath path;
  path.base = base;
  path.order = order;
  path.statistic = statistic.label();
  for (const PeriodModel& target : periods) {
    DecompositionRow row;
    row.period = target.period();
    row.base_value = base_value;
    row.component.assign(kDefaultOrder.size(), 0.0);
    double value = base_value;
    if (target.period() != base) {
      CounterfactualSpec spec = start;
      for (Block b : order) {
        switch (b) {
          case Block::composition: spec.composition = target.period(); break;
          case Block::selection: spec.selection = target.period(); break;
          case Block::structural: spec.wage = target.period(); break;
          case Block::sorting: spec.sorting = target.period(); break;
        }
        const CounterfactualModel model(periods, spec, opts);
        const double next = statistic.evaluate(model);
        row.component[static_cast<std::size_t>(b)] = next - value;
        value = next;
        if (model.projections() > 0)
          row.notes.push_back(block_name(b) + ": " + std::to_string(model.projections()) +
                              " correlation matrices projected to PD");
        if (model.imputed_cells() > 0)
          row.notes.push_back(block_name(b) + ": " + std::to_string(model.imputed_cells()) +
                              " flagged cells imputed");
      }
    }
    row.value = value;
    row.total = value - base_value;
    path.rows.push_back(std::move(row));
  }
  return path;
}

}  // namespace sortsel
