#include "sortsel/datagen.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace sortsel {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// 52 bits keep the midpoint strictly inside (0, 1).
double open_unit(std::uint64_t bits) {
  return (static_cast<double>(bits >> 12) + 0.5) * 0x1.0p-52;
}

double categorical(const CovariateSpec& c, double u) {
  double cum = 0.0;
  for (std::size_t k = 0; k + 1 < c.values.size(); ++k) {
    cum += c.probs[k];
    if (u < cum) return c.values[k];
  }
  return c.values.back();
}

int count_x(const DgpSpec& s) {
  int k = 0;
  for (const auto& c : s.covariates) k += c.excluded ? 0 : 1;
  return k;
}

LocalParams rho_params(const DgpSpec& s) {
  LocalParams p;
  p.rho = s.rho;
  return p;
}

}  // namespace

double standard_normal(std::uint64_t bits) { return normal_quantile(open_unit(bits)); }

std::vector<std::string> DgpSpec::x_names() const {
  std::vector<std::string> out;
  for (const auto& c : covariates)
    if (!c.excluded) out.push_back(c.name);
  return out;
}

std::vector<std::string> DgpSpec::z_only_names() const {
  std::vector<std::string> out;
  for (const auto& c : covariates)
    if (c.excluded) out.push_back(c.name);
  return out;
}

void validate(const DgpSpec& s) {
  const int kx = count_x(s);
  const int kz = static_cast<int>(s.covariates.size());
  if (s.gamma_w.size() != 1 + kz || s.gamma_h.size() != 1 + kz) {
    throw std::invalid_argument("dgp: gamma length must be 1 + number of covariates");
  }
  if (s.wage_w.coef.size() != 1 + kx || s.wage_h.coef.size() != 1 + kx) {
    throw std::invalid_argument("dgp: wage coefficients must have length 1 + number of X");
  }
  if (!(s.wage_w.scale > 0.0) || !(s.wage_h.scale > 0.0)) {
    throw std::invalid_argument("dgp: wage scale must be positive");
  }
  for (const auto& c : s.covariates) {
    if (c.values.empty() || c.values.size() != c.probs.size()) {
      throw std::invalid_argument("dgp: covariate " + c.name + " has mismatched support");
    }
    double tot = 0.0;
    for (double p : c.probs) {
      if (!(p >= 0.0)) throw std::invalid_argument("dgp: negative probability in " + c.name);
      tot += p;
    }
    if (std::fabs(tot - 1.0) > 1e-9) {
      throw std::invalid_argument("dgp: probabilities of " + c.name + " do not sum to 1");
    }
  }
  if (s.n < 1) throw std::invalid_argument("dgp: n must be positive");
  for (Rho r : kAllRhos) {
    if (!(std::fabs(s[r]) < 1.0)) throw std::invalid_argument("dgp: " + rho_name(r) + " outside (-1, 1)");
  }
  const double ev = min_eigenvalue(sigma_matrix(rho_params(s)));
  if (!(ev > kPdEps)) {
    throw std::invalid_argument("dgp: correlation matrix is not positive definite (min eigenvalue " +
                                std::to_string(ev) + ")");
  }
}

bool excluded_relevant(const DgpSpec& s) {
  const int kx = count_x(s);
  int pos = 1 + kx;
  for (const auto& c : s.covariates) {
    if (!c.excluded) continue;
    if (s.gamma_w(pos) == 0.0 && s.gamma_h(pos) == 0.0) return false;
    ++pos;
  }
  return true;
}

SimulatedSample simulate(const DgpSpec& s) {
  validate(s);
  const int n = s.n;
  const int kx = count_x(s);
  const int kz = static_cast<int>(s.covariates.size()) - kx;
  const Mat l = Eigen::LLT<Mat>(sigma_matrix(rho_params(s))).matrixL();

  SimulatedSample out;
  HouseholdData& d = out.data;
  d.d_w.resize(n);
  d.d_h.resize(n);
  d.y_w.resize(n);
  d.y_h.resize(n);
  d.weight = Vec::Ones(n);
  d.period.assign(n, s.period);
  d.x.resize(n, kx);
  d.z_only.resize(n, kz);
  d.x_names = s.x_names();
  d.z_only_names = s.z_only_names();
  LatentTruth& t = out.latent;
  t.y_w.resize(n);
  t.y_h.resize(n);
  t.index_w.resize(n);
  t.index_h.resize(n);

  std::mt19937_64 rng(s.seed);
  Vec z(1 + kx + kz), e(4);
  for (int i = 0; i < n; ++i) {
    z(0) = 1.0;
    int xi = 0, zi = 0;
    for (const auto& c : s.covariates) {
      const double v = categorical(c, open_unit(rng()));
      if (c.excluded) d.z_only(i, zi++) = v;
      else d.x(i, xi++) = v;
    }
    z.segment(1, kx) = d.x.row(i).transpose();
    z.segment(1 + kx, kz) = d.z_only.row(i).transpose();
    for (int k = 0; k < 4; ++k) e(k) = standard_normal(rng());
    const Vec u = l * e;
    t.index_w(i) = z.dot(s.gamma_w);
    t.index_h(i) = z.dot(s.gamma_h);
    d.d_w(i) = u(0) <= t.index_w(i) ? 1.0 : 0.0;
    d.d_h(i) = u(1) <= t.index_h(i) ? 1.0 : 0.0;
    const Vec xrow = z.head(1 + kx);
    t.y_w(i) = std::exp(xrow.dot(s.wage_w.coef) + s.wage_w.scale * u(2));
    t.y_h(i) = std::exp(xrow.dot(s.wage_h.coef) + s.wage_h.scale * u(3));
    const bool both = d.d_w(i) > 0.5 && d.d_h(i) > 0.5;
    d.y_w(i) = both ? t.y_w(i) : kNaN;
    d.y_h(i) = both ? t.y_h(i) : kNaN;
  }
  return out;
}

SimulatedSample simulate_periods(const std::vector<DgpSpec>& specs) {
  if (specs.empty()) throw std::invalid_argument("simulate_periods: no periods");
  std::vector<SimulatedSample> parts;
  int n = 0;
  for (const auto& s : specs) {
    parts.push_back(simulate(s));
    n += s.n;
  }
  SimulatedSample out;
  HouseholdData& d = out.data;
  const HouseholdData& f = parts.front().data;
  d.x_names = f.x_names;
  d.z_only_names = f.z_only_names;
  d.d_w.resize(n);
  d.d_h.resize(n);
  d.y_w.resize(n);
  d.y_h.resize(n);
  d.weight.resize(n);
  d.x.resize(n, f.x.cols());
  d.z_only.resize(n, f.z_only.cols());
  out.latent.y_w.resize(n);
  out.latent.y_h.resize(n);
  out.latent.index_w.resize(n);
  out.latent.index_h.resize(n);
  int at = 0;
  for (const auto& p : parts) {
    if (p.data.x_names != d.x_names || p.data.z_only_names != d.z_only_names) {
      throw std::invalid_argument("simulate_periods: periods use different covariates");
    }
    const int m = p.data.size();
    d.d_w.segment(at, m) = p.data.d_w;
    d.d_h.segment(at, m) = p.data.d_h;
    d.y_w.segment(at, m) = p.data.y_w;
    d.y_h.segment(at, m) = p.data.y_h;
    d.weight.segment(at, m) = p.data.weight;
    d.x.middleRows(at, m) = p.data.x;
    d.z_only.middleRows(at, m) = p.data.z_only;
    d.period.insert(d.period.end(), p.data.period.begin(), p.data.period.end());
    out.latent.y_w.segment(at, m) = p.latent.y_w;
    out.latent.y_h.segment(at, m) = p.latent.y_h;
    out.latent.index_w.segment(at, m) = p.latent.index_w;
    out.latent.index_h.segment(at, m) = p.latent.index_h;
    at += m;
  }
  return out;
}

Vec true_beta(const WageModel& m, double y) {
  Vec b = Vec::Zero(m.coef.size());
  if (std::isinf(y)) return b;
  b(0) = (std::log(y) - m.coef(0)) / m.scale;
  b.tail(m.coef.size() - 1) = -m.coef.tail(m.coef.size() - 1) / m.scale;
  return b;
}

LocalParams true_params(const DgpSpec& s, double y_w, double y_h) {
  LocalParams p = rho_params(s);
  p.beta_w = true_beta(s.wage_w, y_w);
  p.beta_h = true_beta(s.wage_h, y_h);
  return p;
}

ModelGridFit true_grid_fit(const DgpSpec& s, const SelectionSample& sample, int size) {
  ModelGridFit fit;
  fit.grid = selected_grid(sample, size);
  fit.period = s.period;
  fit.first.gamma_w = s.gamma_w;
  fit.first.gamma_h = s.gamma_h;
  fit.first.rho = s[Rho::dwdh];
  fit.first.converged = true;
  const HouseholdData& d = sample.data();
  fit.participation_names = {"const"};
  fit.participation_names.insert(fit.participation_names.end(), d.x_names.begin(), d.x_names.end());
  fit.participation_names.insert(fit.participation_names.end(), d.z_only_names.begin(), d.z_only_names.end());
  fit.wage_cols_w = sample.wage_cols_w();
  fit.wage_cols_h = sample.wage_cols_h();
  for (int c : fit.wage_cols_w) fit.wage_names_w.push_back(fit.participation_names[c]);
  for (int c : fit.wage_cols_h) fit.wage_names_h.push_back(fit.participation_names[c]);
  const int open = size - 1;
  for (int k = 0; k < size; ++k)
    for (int l = 0; l < size; ++l) {
      CellFit c;
      c.kind = k < open ? (l < open ? CellKind::full : CellKind::marginal_w)
                        : (l < open ? CellKind::marginal_h : CellKind::trivial);
      c.params = true_params(s, fit.grid.cut_w(k), fit.grid.cut_h(l));
      c.params.cell_w = k;
      c.params.cell_h = l;
      c.converged = true;
      fit.cells.push_back(std::move(c));
    }
  return fit;
}

double true_wage_cdf(const WageModel& m, const Vec& wage_row, double y) {
  return normal_cdf(wage_row.dot(true_beta(m, y)));
}

CovariateLaw covariate_law(const DgpSpec& s) {
  const int kx = count_x(s);
  const int kz = static_cast<int>(s.covariates.size());
  // Order columns as [X..., Z-only...] to match the participation design.
  std::vector<const CovariateSpec*> order;
  for (const auto& c : s.covariates)
    if (!c.excluded) order.push_back(&c);
  for (const auto& c : s.covariates)
    if (c.excluded) order.push_back(&c);
  std::size_t total = 1;
  for (const auto* c : order) total *= c->values.size();
  CovariateLaw law;
  law.rows.resize(static_cast<Eigen::Index>(total), 1 + kz);
  law.probs.resize(static_cast<Eigen::Index>(total));
  for (std::size_t r = 0; r < total; ++r) {
    std::size_t rem = r;
    double p = 1.0;
    law.rows(r, 0) = 1.0;
    for (int j = kz - 1; j >= 0; --j) {
      const auto* c = order[j];
      const std::size_t k = rem % c->values.size();
      rem /= c->values.size();
      law.rows(r, 1 + j) = c->values[k];
      p *= c->probs[k];
    }
    law.probs(r) = p;
  }
  (void)kx;
  return law;
}

namespace {

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  int i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

}  // namespace

DgpSpec acceptance_dgp(int n, std::uint64_t seed) {
  DgpSpec s;
  s.covariates = {
      {"educ", {0.0, 1.0, 2.0}, {0.3, 0.4, 0.3}, false},
      {"kids", {0.0, 1.0}, {0.55, 0.45}, true},
      {"young_child", {0.0, 1.0}, {0.75, 0.25}, true},
  };
  s.gamma_w = vec({0.5, 0.3, -0.7, -0.5});
  s.gamma_h = vec({1.0, 0.2, -0.4, 0.3});
  s.wage_w = {vec({2.3, 0.25}), 0.5};
  s.wage_h = {vec({2.6, 0.2}), 0.55};
  s[Rho::dwdh] = 0.1;
  s[Rho::dwyw] = -0.3;
  s[Rho::dhyh] = -0.1;
  s[Rho::dwyh] = -0.1;
  s[Rho::dhyw] = -0.1;
  s[Rho::ywyh] = 0.25;
  s.n = n;
  s.seed = seed;
  return s;
}

DgpSpec identification_dgp(int n, std::uint64_t seed) {
  DgpSpec s = acceptance_dgp(n, seed);
  s.covariates = {
      {"kids", {0.0, 1.0}, {0.5, 0.5}, true},
      {"young_child", {0.0, 1.0}, {0.5, 0.5}, true},
  };
  s.gamma_w = vec({1.5, -2.5, 0.0});
  s.gamma_h = vec({1.5, 0.0, -2.5});
  s.wage_w = {vec({2.3}), 0.5};
  s.wage_h = {vec({2.6}), 0.55};
  return s;
}

std::vector<DgpSpec> cps_like_periods(int n, std::uint64_t seed) {
  DgpSpec a;
  a.covariates = {
      {"educ", {0.0, 1.0, 2.0}, {0.4, 0.4, 0.2}, false},
      {"south", {0.0, 1.0}, {0.7, 0.3}, false},
      {"kids", {0.0, 1.0}, {0.5, 0.5}, true},
      {"young_child", {0.0, 1.0}, {0.7, 0.3}, true},
  };
  a.gamma_w = vec({0.1, 0.3, -0.1, -0.7, -0.5});
  a.gamma_h = vec({1.1, 0.25, 0.0, -0.3, 0.2});
  a.wage_w = {vec({2.2, 0.25, -0.1}), 0.5};
  a.wage_h = {vec({2.6, 0.25, -0.1}), 0.55};
  a[Rho::dwdh] = 0.1;
  a[Rho::dwyw] = -0.3;
  a[Rho::dhyh] = -0.1;
  a[Rho::ywyh] = 0.18;
  a.n = n;
  a.seed = mix_seed(seed, 1);
  a.period = 0;

  DgpSpec b = a;
  b.covariates[0].probs = {0.25, 0.4, 0.35};
  b.gamma_w = vec({0.4, 0.3, -0.1, -0.5, -0.4});
  b.wage_w = {vec({2.3, 0.35, -0.1}), 0.55};
  b.wage_h = {vec({2.65, 0.35, -0.1}), 0.6};
  b[Rho::dwyw] = 0.2;
  b[Rho::ywyh] = 0.24;
  b.seed = mix_seed(seed, 2);
  b.period = 1;
  return {a, b};
}

McEstimate mc_orthant(const Vec& x, const CorrelationMatrix& corr, long n_draws,
                      std::uint64_t seed) {
  if (n_draws < 10000) throw std::invalid_argument("mc_orthant: needs at least 1e4 draws");
  if (x.size() != corr.dim()) throw std::invalid_argument("mc_orthant: dimension mismatch");
  const int dim = corr.dim();
  const Mat l = Eigen::LLT<Mat>(corr.matrix()).matrixL();
  std::mt19937_64 rng(seed);
  Vec e(dim);
  long hits = 0;
  for (long r = 0; r < n_draws; ++r) {
    for (int k = 0; k < dim; ++k) e(k) = standard_normal(rng());
    const Vec v = l * e;
    bool in = true;
    for (int k = 0; k < dim && in; ++k) in = v(k) <= x(k);
    hits += in;
  }
  const double p = static_cast<double>(hits) / static_cast<double>(n_draws);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(n_draws))};
}

}  // namespace sortsel
