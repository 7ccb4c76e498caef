#include "sortsel/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <mutex>
#include <random>
#include <stdexcept>

#include "sortsel/optim.hpp"
#include "sortsel/parallel.hpp"
#include "sortsel/rows.hpp"

namespace sortsel {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
// Above this many cached doubles the first-stage GHK pieces are recomputed.
constexpr std::size_t kCacheLimit = std::size_t{6} << 20;

std::uint64_t hash_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (Eigen::Index j = 0; j < row.size(); ++j) {
    std::uint64_t bits;
    const double v = row(j) == 0.0 ? 0.0 : row(j);  // fold -0 into +0
    std::memcpy(&bits, &v, sizeof bits);
    h = mix_seed(h, bits);
  }
  return h;
}

double to_unit(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

Mat select_columns(const Mat& m, const std::vector<int>& cols) {
  Mat out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.col(k) = m.col(cols[k]);
  return out;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Correlation bookkeeping.

std::string rho_name(Rho r) {
  switch (r) {
    case Rho::dwdh: return "rho_dwdh";
    case Rho::dwyw: return "rho_dwyw";
    case Rho::dhyh: return "rho_dhyh";
    case Rho::dwyh: return "rho_dwyh";
    case Rho::dhyw: return "rho_dhyw";
    case Rho::ywyh: return "rho_ywyh";
  }
  return "?";
}

Rho parse_rho(const std::string& name) {
  for (Rho r : kAllRhos) {
    if (rho_name(r) == name || rho_name(r).substr(4) == name) return r;
  }
  throw std::invalid_argument("unknown correlation '" + name + "'");
}

std::pair<int, int> rho_position(Rho r) {
  switch (r) {
    case Rho::dwdh: return {0, 1};
    case Rho::dwyw: return {0, 2};
    case Rho::dhyh: return {1, 3};
    case Rho::dwyh: return {0, 3};
    case Rho::dhyw: return {1, 2};
    case Rho::ywyh: return {2, 3};
  }
  return {0, 0};
}

Mat sigma_matrix(const LocalParams& p) {
  Mat s = Mat::Identity(4, 4);
  for (Rho r : kAllRhos) {
    const auto [i, j] = rho_position(r);
    s(i, j) = s(j, i) = p[r];
  }
  return s;
}

AssembledSigma assemble_sigma(const LocalParams& p, double pd_eps) {
  Mat s = sigma_matrix(p);
  for (Rho r : kAllRhos) {
    if (!std::isfinite(p[r])) throw std::invalid_argument(rho_name(r) + " is not finite");
  }
  // Entries at |rho| >= 1 are pulled inside before projection.
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j)
      if (i != j) s(i, j) = std::clamp(s(i, j), -1.0 + 1e-9, 1.0 - 1e-9);
  PdProjection proj = project_to_pd(s, pd_eps);
  const double change = (proj.corr.matrix() - sigma_matrix(p)).cwiseAbs().maxCoeff();
  return {std::move(proj.corr), change > 1e-6, change};
}

std::string cell_kind_name(CellKind k) {
  switch (k) {
    case CellKind::full: return "full";
    case CellKind::marginal_w: return "marginal_w";
    case CellKind::marginal_h: return "marginal_h";
    case CellKind::trivial: return "trivial";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Sample preparation.

SelectionSample::SelectionSample(HouseholdData data, DesignSpec design)
    : data_(std::move(data)), design_(std::move(design)) {
  data_.validate();
  z_ = participation_design(data_);
  cols_w_ = wage_columns_in_participation(data_, design_.wage_w);
  cols_h_ = wage_columns_in_participation(data_, design_.wage_h);
  working_ = data_.working();
  Mat zw(static_cast<Eigen::Index>(working_.size()), z_.cols());
  for (std::size_t k = 0; k < working_.size(); ++k) zw.row(k) = z_.row(working_[k]);
  const RowGroups g = group_rows(zw);
  group_of_ = g.group_of;
  group_z_.resize(g.count(), z_.cols());
  group_key_.resize(g.count());
  for (int k = 0; k < g.count(); ++k) {
    group_z_.row(k) = zw.row(g.representative[k]);
    group_key_[k] = hash_row(group_z_.row(k));
  }
}

Mat SelectionSample::wage_rows_w(const Mat& zrows) const { return select_columns(zrows, cols_w_); }
Mat SelectionSample::wage_rows_h(const Mat& zrows) const { return select_columns(zrows, cols_h_); }

BiprobitFit first_stage(const SelectionSample& sample) {
  const HouseholdData& d = sample.data();
  return biprobit_fit(d.d_w, d.d_h, sample.z(), d.weight);
}

// ---------------------------------------------------------------------------
// Cell likelihood.

CellLikelihood::CellLikelihood(const SelectionSample& sample, const BiprobitFit& first,
                               double cut_w, double cut_h, const SecondStageOptions& opts)
    : sample_(sample),
      pw_(sample.wage_dim_w()),
      ph_(sample.wage_dim_h()),
      rho_dd_(first.rho) {
  const bool open_w = std::isinf(cut_w), open_h = std::isinf(cut_h);
  kind_ = open_w ? (open_h ? CellKind::trivial : CellKind::marginal_h)
                 : (open_h ? CellKind::marginal_w : CellKind::full);
  const Mat& gz = sample.group_z();
  const int groups = static_cast<int>(gz.rows());
  xw_ = sample.wage_rows_w(gz);
  xh_ = sample.wage_rows_h(gz);
  aw_ = gz * first.gamma_w;
  ah_ = gz * first.gamma_h;
  w_.assign(groups, {0.0, 0.0, 0.0, 0.0});
  const HouseholdData& d = sample.data();
  const auto& working = sample.working();
  for (std::size_t k = 0; k < working.size(); ++k) {
    const int i = working[k];
    const int q = 2 * (d.y_w(i) > cut_w) + (d.y_h(i) > cut_h);
    w_[sample.group_of()[k]][q] += d.weight(i);
    quad_w_[q] += d.weight(i);
    wsum_ += d.weight(i);
  }
  if (kind_ == CellKind::trivial) return;

  const int draws = opts.draws;
  base_ = UniformPointSet(draws, 3, mix_seed(opts.seed, opts.replicate)).matrix();
  shift_.resize(groups, 3);
  for (int g = 0; g < groups; ++g) {
    const std::uint64_t s = mix_seed(mix_seed(opts.seed, sample.group_key()[g]), opts.replicate);
    for (int c = 0; c < 3; ++c) shift_(g, c) = to_unit(mix_seed(s, static_cast<std::uint64_t>(c)));
  }
  cached_ = static_cast<std::size_t>(groups) * static_cast<std::size_t>(draws) * 3 <= kCacheLimit;
  if (cached_) {
    cache_.resize(static_cast<std::size_t>(groups) * draws * 3);
    const double s22 = std::sqrt(1.0 - rho_dd_ * rho_dd_);
    for (int g = 0; g < groups; ++g) {
      const double e1 = normal_cdf(aw_(g));
      for (int r = 0; r < draws; ++r) {
        double u1 = base_(r, 0) + shift_(g, 0), u2 = base_(r, 1) + shift_(g, 1);
        u1 -= std::floor(u1);
        u2 -= std::floor(u2);
        const double eta1 = normal_quantile_clamped(u1 * e1);
        const double e2 = normal_cdf((ah_(g) - rho_dd_ * eta1) / s22);
        const double eta2 = normal_quantile_clamped(u2 * e2);
        double* c = &cache_[(static_cast<std::size_t>(g) * draws + r) * 3];
        c[0] = eta1;
        c[1] = eta2;
        c[2] = e1 * e2;
      }
    }
  }
}

Vec CellLikelihood::pack(const LocalParams& p) const {
  Vec t(dim());
  t.head(pw_) = p.beta_w.size() == pw_ ? p.beta_w : Vec::Zero(pw_);
  t.segment(pw_, ph_) = p.beta_h.size() == ph_ ? p.beta_h : Vec::Zero(ph_);
  for (int k = 0; k < 5; ++k) t(pw_ + ph_ + k) = std::atanh(p[kStageTwoRhos[k]]);
  return t;
}

LocalParams CellLikelihood::unpack(const Vec& theta) const {
  LocalParams p;
  p.beta_w = theta.head(pw_);
  p.beta_h = theta.segment(pw_, ph_);
  p[Rho::dwdh] = rho_dd_;
  for (int k = 0; k < 5; ++k) p[kStageTwoRhos[k]] = std::tanh(theta(pw_ + ph_ + k));
  return p;
}

double CellLikelihood::operator()(const Vec& theta, Vec* grad, Mat* bhhh) const {
  return evaluate(theta, grad, bhhh, nullptr);
}

double CellLikelihood::loglik(const Vec& theta) const {
  return -evaluate(theta, nullptr, nullptr, nullptr) * wsum_;
}

std::array<double, 4> CellLikelihood::quadrant_probabilities(const Vec& theta, int group) const {
  std::vector<std::array<double, 4>> probs;
  evaluate(theta, nullptr, nullptr, &probs);
  return probs.at(group);
}

// Entries of the lower Cholesky factor that the wage coordinates depend on.
enum LEntry { L31, L32, L33, L41, L42, L43, L44, kLEntries };
constexpr int kRow[kLEntries] = {2, 2, 2, 3, 3, 3, 3};
constexpr int kCol[kLEntries] = {0, 1, 2, 0, 1, 2, 3};

double CellLikelihood::evaluate(const Vec& theta, Vec* grad, Mat* bhhh,
                                std::vector<std::array<double, 4>>* probs) const {
  if (kind_ == CellKind::trivial) {
    if (grad) grad->setZero(dim());
    return 0.0;
  }
  const LocalParams p = unpack(theta);
  const Mat sigma = sigma_matrix(p);
  Eigen::LLT<Mat> llt(sigma);
  if (llt.info() != Eigen::Success) return kInf;
  const Mat l = llt.matrixL();
  if (l.diagonal().minCoeff() < 1e-6) return kInf;

  // dL / d rho_k = L * lowerhalf(L^{-1} dSigma L^{-T}).
  std::array<Mat, 5> dl;
  if (grad || bhhh) {
    const Mat linv = l.triangularView<Eigen::Lower>().solve(Mat::Identity(4, 4));
    for (int k = 0; k < 5; ++k) {
      const auto [i, j] = rho_position(kStageTwoRhos[k]);
      Mat ds = Mat::Zero(4, 4);
      ds(i, j) = ds(j, i) = 1.0;
      Mat m = linv * ds * linv.transpose();
      Mat low = m.triangularView<Eigen::StrictlyLower>();
      low.diagonal() = 0.5 * m.diagonal();
      dl[k] = l * low;
    }
  }

  const bool open_w = kind_ == CellKind::marginal_h;
  const bool open_h = kind_ == CellKind::marginal_w;
  const Vec mw = xw_ * theta.head(pw_);
  const Vec mh = xh_ * theta.segment(pw_, ph_);
  const int draws = static_cast<int>(base_.rows());
  const double s22 = std::sqrt(1.0 - rho_dd_ * rho_dd_);
  const int groups = static_cast<int>(xw_.rows());
  const int n = dim();

  double ll = 0.0;
  if (grad) grad->setZero(n);
  if (bhhh) bhhh->setZero(n, n);
  if (probs) probs->assign(groups, {0.0, 0.0, 0.0, 0.0});
  Vec score(n);

  for (int g = 0; g < groups; ++g) {
    const auto& wq = w_[g];
    const double wg = wq[0] + wq[1] + wq[2] + wq[3];
    if (wg <= 0.0 && !probs) continue;
    std::array<double, 4> prob{};
    std::array<std::array<double, 2 + kLEntries>, 4> dprob{};
    double p12 = 0.0;
    const double e1 = cached_ ? 0.0 : normal_cdf(aw_(g));
    for (int r = 0; r < draws; ++r) {
      double eta1, eta2, w12;
      double u3 = base_(r, 2) + shift_(g, 2);
      u3 -= std::floor(u3);
      if (cached_) {
        const double* c = &cache_[(static_cast<std::size_t>(g) * draws + r) * 3];
        eta1 = c[0];
        eta2 = c[1];
        w12 = c[2];
      } else {
        double u1 = base_(r, 0) + shift_(g, 0), u2 = base_(r, 1) + shift_(g, 1);
        u1 -= std::floor(u1);
        u2 -= std::floor(u2);
        eta1 = normal_quantile_clamped(u1 * e1);
        const double e2 = normal_cdf((ah_(g) - rho_dd_ * eta1) / s22);
        eta2 = normal_quantile_clamped(u2 * e2);
        w12 = e1 * e2;
      }
      p12 += w12;
      for (int q = 0; q < 4; ++q) {
        if (wq[q] <= 0.0 && !probs) continue;
        const double sw = (q & 2) ? -1.0 : 1.0;
        const double sh = (q & 1) ? -1.0 : 1.0;
        if ((open_w && sw < 0) || (open_h && sh < 0)) continue;
        double c3 = 0.0, e3 = 1.0, eta3 = 0.0, deta3 = 0.0;
        if (!open_w) {
          c3 = (sw * mw(g) - sw * l(2, 0) * eta1 - sw * l(2, 1) * eta2) / l(2, 2);
          e3 = normal_cdf(c3);
          if (e3 < kProbFloor) continue;
          eta3 = normal_quantile_clamped(u3 * e3);
          const double pdf3 = normal_pdf(eta3);
          deta3 = pdf3 > 0.0 ? u3 * normal_pdf(c3) / pdf3 : 0.0;
        }
        double c4 = 0.0, e4 = 1.0;
        const double l43 = sw * sh * l(3, 2);
        if (!open_h) {
          c4 = (sh * mh(g) - sh * l(3, 0) * eta1 - sh * l(3, 1) * eta2 - l43 * eta3) / l(3, 3);
          e4 = normal_cdf(c4);
          if (e4 < kProbFloor) continue;
        }
        const double w = w12 * e3 * e4;
        prob[q] += w;
        if (!grad && !bhhh) continue;
        const double lam4 = open_h ? 0.0 : inverse_mills(c4);
        const double a3 = open_w ? 0.0 : inverse_mills(c3) - lam4 * l43 * deta3 / l(3, 3);
        auto& d = dprob[q];
        // Derivatives of log w in unflipped coordinates, times w.
        d[0] += w * sw * a3 / l(2, 2);                           // m_w
        d[1] += w * sh * lam4 / l(3, 3);                         // m_h
        d[2 + L31] += w * sw * (-eta1 * a3 / l(2, 2));
        d[2 + L32] += w * sw * (-eta2 * a3 / l(2, 2));
        d[2 + L33] += w * (-c3 * a3 / l(2, 2));
        d[2 + L41] += w * sh * (-eta1 * lam4 / l(3, 3));
        d[2 + L42] += w * sh * (-eta2 * lam4 / l(3, 3));
        d[2 + L43] += w * sw * sh * (-eta3 * lam4 / l(3, 3));
        d[2 + L44] += w * (-c4 * lam4 / l(3, 3));
      }
    }
    p12 /= draws;
    for (int q = 0; q < 4; ++q) prob[q] /= draws;
    if (probs) {
      for (int q = 0; q < 4; ++q) (*probs)[g][q] = prob[q] / p12;
    }
    for (int q = 0; q < 4; ++q) {
      if (wq[q] <= 0.0) continue;
      const double pq = std::max(prob[q], kProbFloor);
      ll += wq[q] * (std::log(pq) - std::log(p12));
      if (!grad && !bhhh) continue;
      const auto& d = dprob[q];
      score.setZero();
      score.head(pw_) = (d[0] / draws / pq) * xw_.row(g).transpose();
      score.segment(pw_, ph_) = (d[1] / draws / pq) * xh_.row(g).transpose();
      for (int k = 0; k < 5; ++k) {
        double s = 0.0;
        for (int e = 0; e < kLEntries; ++e) s += d[2 + e] * dl[k](kRow[e], kCol[e]);
        const double rho = p[kStageTwoRhos[k]];
        score(pw_ + ph_ + k) = s / draws / pq * (1.0 - rho * rho);
      }
      if (grad) *grad -= wq[q] * score;
      if (bhhh) bhhh->noalias() += wq[q] * score * score.transpose();
    }
  }
  if (grad) *grad /= wsum_;
  return -ll / wsum_;
}

// ---------------------------------------------------------------------------
// Cell fit.

namespace {

struct WageStart {
  Vec beta;
  Vec index;  // per working couple
};

WageStart wage_start(const Mat& design, const Vec& indicator, const Vec& weights) {
  WageStart s;
  try {
    s.beta = probit_fit(indicator, design, weights).coef;
  } catch (const EstimationError&) {
    const double share = std::clamp(indicator.dot(weights) / weights.sum(), 1e-4, 1.0 - 1e-4);
    s.beta = Vec::Zero(design.cols());
    s.beta(0) = normal_quantile(share);
  }
  s.index = design * s.beta;
  return s;
}

}  // namespace

CellFit second_stage_cell(const SelectionSample& sample, const BiprobitFit& first, double cut_w,
                          double cut_h, const SecondStageOptions& opts) {
  const CellLikelihood lik(sample, first, cut_w, cut_h, opts);
  const int pw = sample.wage_dim_w(), ph = sample.wage_dim_h();
  CellFit fit;
  fit.kind = lik.kind();
  fit.se = Vec::Constant(lik.dim(), kNaN);
  fit.params.beta_w = Vec::Zero(pw);
  fit.params.beta_h = Vec::Zero(ph);
  fit.params[Rho::dwdh] = first.rho;
  if (fit.kind == CellKind::trivial) {
    fit.converged = true;
    return fit;
  }

  const auto qw = lik.quadrant_weight();
  const bool empty = fit.kind == CellKind::full
                         ? std::min({qw[0], qw[1], qw[2], qw[3]}) <= 0.0
                         : (fit.kind == CellKind::marginal_w ? std::min(qw[0], qw[2]) <= 0.0
                                                             : std::min(qw[0], qw[1]) <= 0.0);
  if (empty) {
    fit.flagged = true;
    fit.flags.push_back("empty wage quadrant");
    return fit;
  }

  // Starting values from distribution regression on the working couples.
  const HouseholdData& d = sample.data();
  const auto& working = sample.working();
  const auto nw = static_cast<Eigen::Index>(working.size());
  Mat zw(nw, sample.z().cols());
  Vec yw(nw), yh(nw), wt(nw);
  for (Eigen::Index k = 0; k < nw; ++k) {
    zw.row(k) = sample.z().row(working[k]);
    yw(k) = d.y_w(working[k]);
    yh(k) = d.y_h(working[k]);
    wt(k) = d.weight(working[k]);
  }
  LocalParams start = fit.params;
  const Vec ind_w = (yw.array() <= cut_w).cast<double>();
  const Vec ind_h = (yh.array() <= cut_h).cast<double>();
  WageStart sw, sh;
  if (fit.kind != CellKind::marginal_h) {
    sw = wage_start(sample.wage_rows_w(zw), ind_w, wt);
    start.beta_w = sw.beta;
  }
  if (fit.kind != CellKind::marginal_w) {
    sh = wage_start(sample.wage_rows_h(zw), ind_h, wt);
    start.beta_h = sh.beta;
  }
  if (fit.kind == CellKind::full) {
    const RhoFit r = bdr_rho_fit(ind_w, ind_h, sw.index, sh.index, wt);
    start[Rho::ywyh] = std::clamp(r.rho, -0.9, 0.9);
  }

  std::vector<int> free;
  auto fixed = [&](Rho r) {
    return std::find(opts.fixed_zero.begin(), opts.fixed_zero.end(), r) != opts.fixed_zero.end();
  };
  const bool use_w = fit.kind != CellKind::marginal_h, use_h = fit.kind != CellKind::marginal_w;
  if (use_w) for (int j = 0; j < pw; ++j) free.push_back(j);
  if (use_h) for (int j = 0; j < ph; ++j) free.push_back(pw + j);
  for (int k = 0; k < 5; ++k) {
    const Rho r = kStageTwoRhos[k];
    const bool touches_w = r == Rho::dwyw || r == Rho::dhyw || r == Rho::ywyh;
    const bool touches_h = r == Rho::dhyh || r == Rho::dwyh || r == Rho::ywyh;
    if ((touches_w && !use_w) || (touches_h && !use_h) || fixed(r)) continue;
    free.push_back(pw + ph + k);
  }
  for (int k = 0; k < 5; ++k) {
    const int pos = pw + ph + k;
    if (std::find(free.begin(), free.end(), pos) == free.end()) start[kStageTwoRhos[k]] = 0.0;
  }

  const Vec theta0 = lik.pack(start);
  const auto nf = static_cast<Eigen::Index>(free.size());
  auto expand = [&](const Vec& v) {
    Vec t = theta0;
    for (Eigen::Index k = 0; k < nf; ++k) t(free[k]) = v(k);
    return t;
  };
  const Objective f = [&](const Vec& v, Vec* g) {
    Vec full_grad;
    const double val = lik(expand(v), g ? &full_grad : nullptr);
    if (g) {
      g->resize(nf);
      if (std::isfinite(val)) {
        for (Eigen::Index k = 0; k < nf; ++k) (*g)(k) = full_grad(free[k]);
      }
    }
    return val;
  };
  Vec v0(nf);
  for (Eigen::Index k = 0; k < nf; ++k) v0(k) = theta0(free[k]);

  Vec g0;
  Mat bhhh;
  lik(theta0, &g0, &bhhh);
  Mat bf(nf, nf);
  for (Eigen::Index a = 0; a < nf; ++a)
    for (Eigen::Index b = 0; b < nf; ++b) bf(a, b) = bhhh(free[a], free[b]) / lik.total_weight();
  const Mat h0 = inverse_spd(bf + 1e-8 * Mat::Identity(nf, nf));

  MinimizeOptions mo;
  mo.grad_tol = opts.grad_tol;
  mo.f_tol = opts.f_tol;
  mo.max_iter = opts.max_iter;
  const MinimizeResult res = minimize_bfgs(f, v0, mo, h0);

  const Vec theta = expand(res.x);
  fit.params = lik.unpack(theta);
  if (!use_w) fit.params.beta_w.setZero();
  if (!use_h) fit.params.beta_h.setZero();
  fit.loglik = -res.value * lik.total_weight();
  fit.iterations = res.iterations;
  fit.grad_norm = res.grad.size() ? res.grad.cwiseAbs().maxCoeff() : 0.0;
  fit.converged = res.converged;
  if (!res.converged) {
    fit.flagged = true;
    fit.flags.push_back("not converged: " + res.status);
  }
  for (int k = 0; k < 5; ++k) {
    const Rho r = kStageTwoRhos[k];
    if (std::fabs(fit.params[r]) > opts.boundary) {
      fit.flagged = true;
      fit.flags.push_back(rho_name(r) + " at the boundary");
    }
  }

  if (opts.compute_se && std::isfinite(res.value)) {
    const Mat hess = numerical_hessian(f, res.x, 1e-4);
    const Mat vcov = inverse_spd(hess * lik.total_weight());
    for (Eigen::Index k = 0; k < nf; ++k) {
      const int pos = free[k];
      double se = vcov(k, k) >= 0.0 ? std::sqrt(vcov(k, k)) : kNaN;
      if (pos >= pw + ph) {
        const double rho = std::tanh(theta(pos));
        se *= 1.0 - rho * rho;
      }
      fit.se(pos) = se;
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Grid.

int ModelGridFit::flagged_count() const {
  return static_cast<int>(std::count_if(cells.begin(), cells.end(),
                                        [](const CellFit& c) { return c.flagged; }));
}

ThresholdGrid selected_grid(const SelectionSample& sample, int size) {
  const HouseholdData& d = sample.data();
  const auto& working = sample.working();
  const auto n = static_cast<Eigen::Index>(working.size());
  if (n == 0) throw EstimationError("grid: no working couples");
  Vec yw(n), yh(n), wt(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    yw(k) = d.y_w(working[k]);
    yh(k) = d.y_h(working[k]);
    wt(k) = d.weight(working[k]);
  }
  return make_grid(yw, yh, size, wt);
}

namespace {

std::vector<std::string> participation_names(const HouseholdData& d) {
  std::vector<std::string> names{"const"};
  names.insert(names.end(), d.x_names.begin(), d.x_names.end());
  names.insert(names.end(), d.z_only_names.begin(), d.z_only_names.end());
  return names;
}

}  // namespace

ModelGridFit fit_grid(const SelectionSample& sample, const ThresholdGrid& grid,
                      const GridOptions& opts) {
  ModelGridFit fit;
  fit.grid = grid;
  fit.first = first_stage(sample);
  fit.participation_names = participation_names(sample.data());
  fit.wage_cols_w = sample.wage_cols_w();
  fit.wage_cols_h = sample.wage_cols_h();
  for (int c : fit.wage_cols_w) fit.wage_names_w.push_back(fit.participation_names[c]);
  for (int c : fit.wage_cols_h) fit.wage_names_h.push_back(fit.participation_names[c]);
  if (!sample.data().period.empty()) fit.period = sample.data().period.front();
  const int g = grid.size;
  fit.cells.resize(static_cast<std::size_t>(g * g));
  run_parallel(g * g, opts.workers, [&](int idx) {
    const int k = idx / g, l = idx % g;
    CellFit c = second_stage_cell(sample, fit.first, grid.cut_w(k), grid.cut_h(l), opts.stage);
    c.params.cell_w = k;
    c.params.cell_h = l;
    fit.cells[static_cast<std::size_t>(idx)] = std::move(c);
  });
  if (!fit.first.converged) {
    for (auto& c : fit.cells) {
      c.flagged = true;
      c.flags.push_back("first stage not converged");
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Bootstrap.

BootstrapResult bootstrap(const HouseholdData& data, const DesignSpec& design,
                          const ThresholdGrid& grid, int replicates, std::uint64_t seed,
                          const GridOptions& opts) {
  if (replicates < 2) throw std::invalid_argument("bootstrap needs at least 2 replicates");
  BootstrapResult out;
  const int n = data.size();
  for (int b = 0; b < replicates; ++b) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(b) + 1));
    std::vector<int> rows(n);
    for (int& r : rows) r = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
    out.indices.push_back(rows);
    try {
      const SelectionSample sample(data.subset(rows), design);
      GridOptions o = opts;
      o.stage.replicate = static_cast<std::uint64_t>(b) + 1;
      o.stage.compute_se = false;
      out.replicates.push_back(fit_grid(sample, grid, o));
    } catch (const std::exception& e) {
      out.failures.push_back("replicate " + std::to_string(b) + ": " + e.what());
    }
  }
  return out;
}

Vec cell_parameters(const CellFit& cell) {
  const auto pw = cell.params.beta_w.size(), ph = cell.params.beta_h.size();
  Vec v(pw + ph + 5);
  v.head(pw) = cell.params.beta_w;
  v.segment(pw, ph) = cell.params.beta_h;
  for (int k = 0; k < 5; ++k) v(pw + ph + k) = cell.params[kStageTwoRhos[k]];
  return v;
}

namespace {

ParameterSummary summarize(const std::vector<Vec>& draws, double coverage) {
  ParameterSummary s;
  s.used = static_cast<int>(draws.size());
  if (draws.empty()) return s;
  const auto p = draws.front().size();
  s.sd.resize(p);
  s.lower.resize(p);
  s.upper.resize(p);
  const double alpha = 0.5 * (1.0 - coverage);
  for (Eigen::Index j = 0; j < p; ++j) {
    std::vector<double> v;
    for (const Vec& d : draws) v.push_back(d(j));
    std::sort(v.begin(), v.end());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    s.sd(j) = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : kNaN;
    auto quant = [&](double t) {
      const double h = t * static_cast<double>(v.size() - 1);
      const auto lo = static_cast<std::size_t>(std::floor(h));
      const std::size_t hi = std::min(lo + 1, v.size() - 1);
      return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    s.lower(j) = quant(alpha);
    s.upper(j) = quant(1.0 - alpha);
  }
  return s;
}

}  // namespace

ParameterSummary summarize_cell(const BootstrapResult& boot, int k, int l, double coverage) {
  std::vector<Vec> draws;
  for (const auto& rep : boot.replicates) {
    const CellFit& c = rep.cell(k, l);
    if (c.usable()) draws.push_back(cell_parameters(c));
  }
  return summarize(draws, coverage);
}

ParameterSummary summarize_first_stage(const BootstrapResult& boot, double coverage) {
  std::vector<Vec> draws;
  for (const auto& rep : boot.replicates) {
    const auto p = rep.first.gamma_w.size();
    Vec v(2 * p + 1);
    v << rep.first.gamma_w, rep.first.gamma_h, rep.first.rho;
    draws.push_back(v);
  }
  return summarize(draws, coverage);
}

}  // namespace sortsel
