#pragma once

// QLR test and its inversion, the sieve Riesz representer under the weak
// norm, and the self-normalized interval.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "psgel/bound.hpp"
#include "psgel/estimator.hpp"
#include "psgel/moments.hpp"
#include "psgel/numeric.hpp"

namespace psgel {

inline constexpr double kQlrNegativeTol = 1e-6;

struct QlrResult {
  double statistic = 0.0;
  double nu = 0.0;
  FitResult restricted;
  FitResult unrestricted;
  double pvalue = 1.0;
  bool clipped = false;
  bool refit = false;  // unrestricted fit restarted from the restricted optimum
};

namespace detail {

inline double qlr_stat(const FitResult& r, const FitResult& u, std::size_t n) {
  return 2.0 * static_cast<double>(n) * (r.criterion - u.criterion);
}

// Unrestricted refit seeded with `extra`, keeping the better of old and new.
inline FitResult refit_unrestricted(const Dataset& data, const FitConfig& cfg, const FitResult& u,
                                    const std::vector<ParamPoint>& extra) {
  FitConfig c = cfg;
  c.multistart = 1;
  std::vector<ParamPoint> starts = extra;
  starts.push_back(u.alpha_hat);
  FitResult f = psgel_fit(data, c, starts);
  return f.criterion <= u.criterion ? f : u;
}

}  // namespace detail

// L(nu) = 2 n [restricted - unrestricted] since the criterion is a sample mean.
inline QlrResult qlr(const Dataset& data, const FitConfig& cfg, double nu,
                     const std::optional<FitResult>& unrestricted = std::nullopt) {
  QlrResult q;
  q.nu = nu;
  q.unrestricted = unrestricted ? *unrestricted : psgel_fit(data, cfg);
  q.restricted = psgel_fit_restricted(data, cfg, nu, {q.unrestricted.alpha_hat});
  if (q.restricted.criterion < q.unrestricted.criterion) {
    q.unrestricted = detail::refit_unrestricted(data, cfg, q.unrestricted, {q.restricted.alpha_hat});
    q.refit = true;
  }
  double stat = detail::qlr_stat(q.restricted, q.unrestricted, data.n());
  if (stat < -kQlrNegativeTol)
    throw OptimizerInconsistencyError("restricted fit beat the unrestricted fit: QLR = " + std::to_string(stat));
  if (stat < 0.0) {
    stat = 0.0;
    q.clipped = true;
  }
  q.statistic = stat;
  q.pvalue = chi2_1_sf(stat);
  return q;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct CiResult {
  std::vector<Interval> intervals;
  double level = 0.95;
  double critical_value = 0.0;
  std::vector<double> grid;
  std::vector<double> statistics;
  bool empty = false;
  double argmin_nu = 0.0;
  double theta_hat = 0.0;
  FitResult unrestricted;
  int restricted_fits = 0;

  bool covers(double v) const {
    for (const auto& iv : intervals)
      if (v >= iv.lo && v <= iv.hi) return true;
    return false;
  }
};

struct CiOptions {
  double bisection_width = 1e-3;
  // Effort for restricted fits along the grid; 0 keeps the fit config value.
  int multistart = 1;
  int refine_stages = 2;  // smoothing stages kept for bisection refits
};

// {nu : L(nu) <= chi2_1 quantile(level)} on a grid, with bisection at each
// accept/reject crossing.
inline CiResult ci_invert(const Dataset& data, const FitConfig& cfg, double level, std::vector<double> grid,
                          const CiOptions& opt = {}, const std::optional<FitResult>& unrestricted = std::nullopt) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("ci_invert: level must lie in (0,1)");
  if (grid.empty()) throw ConfigError("ci_invert: empty grid");
  CiResult ci;
  ci.level = level;
  ci.critical_value = chi2_1_quantile(level);
  ci.unrestricted = unrestricted ? *unrestricted : psgel_fit(data, cfg);
  const double th = ci.unrestricted.alpha_hat.theta;
  ci.theta_hat = th;
  grid.push_back(th);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  grid.erase(std::remove_if(grid.begin(), grid.end(), [&](double v) { return v < cfg.theta_lo || v > cfg.theta_hi; }),
             grid.end());

  FitConfig rc = cfg;
  if (opt.multistart > 0) rc.multistart = opt.multistart;
  FitConfig bc = rc;
  if (opt.refine_stages >= 0 && static_cast<std::size_t>(opt.refine_stages) < bc.bandwidth_steps.size())
    bc.bandwidth_steps.erase(bc.bandwidth_steps.begin(),
                             bc.bandwidth_steps.end() - opt.refine_stages);

  // Restricted fits walk outward from theta_hat so warm starts chain.
  const std::size_t n = grid.size();
  std::vector<FitResult> fits(n);
  const auto centre = static_cast<std::size_t>(std::find(grid.begin(), grid.end(), th) - grid.begin());
  auto fit_at = [&](const FitConfig& c, double nu, const std::vector<ParamPoint>& warm) {
    ++ci.restricted_fits;
    return psgel_fit_restricted(data, c, nu, warm);
  };
  fits[centre] = fit_at(rc, th, {ci.unrestricted.alpha_hat});
  for (std::size_t i = centre + 1; i < n; ++i) fits[i] = fit_at(rc, grid[i], {fits[i - 1].alpha_hat, ci.unrestricted.alpha_hat});
  for (std::size_t i = centre; i-- > 0;) fits[i] = fit_at(rc, grid[i], {fits[i + 1].alpha_hat, ci.unrestricted.alpha_hat});

  // The unrestricted infimum cannot exceed any restricted value.
  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (fits[i].criterion < fits[best].criterion) best = i;
  if (fits[best].criterion < ci.unrestricted.criterion)
    ci.unrestricted = detail::refit_unrestricted(data, cfg, ci.unrestricted, {fits[best].alpha_hat});
  auto stat_of = [&](const FitResult& r) {
    return std::max(0.0, detail::qlr_stat(r, ci.unrestricted, data.n()));
  };

  ci.grid = grid;
  std::vector<bool> acc(n);
  for (std::size_t i = 0; i < n; ++i) {
    ci.statistics.push_back(stat_of(fits[i]));
    acc[i] = ci.statistics.back() <= ci.critical_value;
  }
  ci.argmin_nu = grid[static_cast<std::size_t>(
      std::min_element(ci.statistics.begin(), ci.statistics.end()) - ci.statistics.begin())];

  // Bisect between an accepted point a and a rejected point r; returns the accepted end.
  auto bisect = [&](double a, double r, const FitResult& fa, const FitResult& fr) {
    ParamPoint wa = fa.alpha_hat, wr = fr.alpha_hat;
    while (std::abs(r - a) > opt.bisection_width) {
      const double mid = 0.5 * (a + r);
      FitResult fm = fit_at(bc, mid, {ParamPoint{mid, wa.pi}, ParamPoint{mid, wr.pi}});
      if (stat_of(fm) <= ci.critical_value) {
        a = mid, wa = fm.alpha_hat;
      } else {
        r = mid, wr = fm.alpha_hat;
      }
    }
    return a;
  };

  for (std::size_t i = 0; i < n;) {
    if (!acc[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < n && acc[j + 1]) ++j;
    Interval iv{grid[i], grid[j]};
    if (i > 0) iv.lo = bisect(grid[i], grid[i - 1], fits[i], fits[i - 1]);
    if (j + 1 < n) iv.hi = bisect(grid[j], grid[j + 1], fits[j], fits[j + 1]);
    ci.intervals.push_back(iv);
    i = j + 1;
  }
  ci.empty = ci.intervals.empty();
  return ci;
}

// Evenly spaced grid of `points` values over [lo, hi].
inline std::vector<double> linear_grid(double lo, double hi, int points) {
  if (points < 2) return {0.5 * (lo + hi)};
  std::vector<double> g(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) g[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (points - 1.0);
  return g;
}

// ---------------------------------------------------------------------------
// Weak norm and Riesz representer on the sieve coordinates (theta, pi).

struct RieszData {
  Mat g_jacobian;  // (J+1) x (K+1)
  Mat h_l;         // (J+1) x (J+1)
  Mat omega;       // M' H^{-1} M, the weak-norm Gram
  Vec vstar;       // coordinates of v*
  Vec ustar;       // v* / ||v*||_w
  double vstar_norm = 0.0;
  double h_ridge = 0.0;
  bool plug_in = false;
  double density_bandwidth = 0.0;

  double weak_inner(const Vec& a, const Vec& b) const { return a.dot(omega * b); }
  double weak_norm(const Vec& a) const { return std::sqrt(std::max(0.0, weak_inner(a, a))); }
};

// Assembles RieszData from M and H.
inline RieszData riesz_from(const Mat& m, const Mat& h) {
  RieszData r;
  r.g_jacobian = m;
  r.h_l = 0.5 * (h + h.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eh(r.h_l, Eigen::EigenvaluesOnly);
  Mat hh = r.h_l;
  if (!(eh.eigenvalues().minCoeff() > 1e-12 * std::max(1e-300, r.h_l.trace()))) {
    r.h_ridge = 1e-10 * std::max(1e-300, r.h_l.trace());
    hh.diagonal().array() += r.h_ridge;
  }
  Eigen::LDLT<Mat> hl(hh);
  r.omega = m.transpose() * hl.solve(m);
  r.omega = 0.5 * (r.omega + r.omega.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eo(r.omega, Eigen::EigenvaluesOnly);
  const double emin = eo.eigenvalues().minCoeff();
  if (!(emin > 1e-12 * std::max(1e-300, r.omega.trace())))
    throw RankDeficiencyError("weak-norm Gram M'H^{-1}M is singular (minimum eigenvalue " + std::to_string(emin) +
                              "); the moment Jacobian must have full column rank");
  const Vec e0 = Vec::Unit(m.cols(), 0);
  r.vstar = r.omega.ldlt().solve(e0);
  r.vstar_norm = std::sqrt(r.vstar(0));
  r.ustar = r.vstar / r.vstar_norm;
  return r;
}

// Oracle ingredients: M = population Jacobian at alpha, H = H_J(alpha, P).
inline RieszData build_m_l_oracle(const ParamPoint& alpha, const PopulationProblem& p) {
  return riesz_from(population_jacobian(alpha, p.grid), population_h(alpha, p.grid));
}

inline double silverman_bandwidth(const Vec& r) {
  const Eigen::Index n = r.size();
  std::vector<double> v(r.data(), r.data() + n);
  const double sd = detail::sample_sd(r);
  const double iqr = detail::quantile_sorted(v, 0.75) - detail::quantile_sorted(v, 0.25);
  double s = std::min(sd, iqr / 1.34);
  if (!(s > 0.0)) s = sd > 0.0 ? sd : 1.0;
  return 0.9 * s * std::pow(static_cast<double>(n), -0.2);
}

// Plug-in ingredients at alpha from the data: the rho1 row is -E_n[mu phi'],
// the density block uses a Gaussian kernel on the residuals Y - h(W).
inline RieszData build_m_l_plugin(const Dataset& data, const FitConfig& cfg, const ParamPoint& alpha) {
  const Bases b = make_bases(cfg, data);
  const SampleDesign d = make_design(data, b, cfg.tau);
  const auto n = static_cast<double>(d.n());
  const int j = d.j(), k = d.k();
  const Vec resid = d.y - d.phi * alpha.pi;
  const double bw = silverman_bandwidth(resid);
  Vec kern(resid.size());
  for (Eigen::Index i = 0; i < resid.size(); ++i) kern(i) = normal_pdf(resid(i) / bw) / bw;
  Mat m = Mat::Zero(j + 1, k + 1);
  m(0, 0) = 1.0;
  m.block(0, 1, 1, k) = -d.dphi.colwise().mean();
  m.block(1, 1, j, k) = d.q.transpose() * kern.asDiagonal() * d.phi / n;
  RieszData r = riesz_from(m, second_moment(d.moments(alpha)));
  r.plug_in = true;
  r.density_bandwidth = bw;
  return r;
}

// Route (ii): sup of |theta| / ||a||_w over random directions a = Omega^{-1/2} z.
inline double vstar_norm_by_search(const RieszData& r, int directions, std::uint64_t seed) {
  Eigen::SelfAdjointEigenSolver<Mat> es(r.omega);
  const Mat inv_sqrt = es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
                       es.eigenvectors().transpose();
  Rng rng(seed);
  const Eigen::Index d = r.omega.rows();
  double best = 0.0;
  Vec z(d);
  for (int it = 0; it < directions; ++it) {
    for (Eigen::Index c = 0; c < d; ++c) z(c) = rng.normal();
    const Vec a = inv_sqrt * z;
    const double wn = r.weak_norm(a);
    if (wn > 0.0) best = std::max(best, std::abs(a(0)) / wn);
  }
  return best;
}

// theta_hat +/- z_{(1+level)/2} ||v*||_w / sqrt(n).
inline Interval self_normalized_ci(double theta_hat, double vstar_norm, std::size_t n, double level) {
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("self_normalized_ci: level must lie in (0,1)");
  const double z = normal_quantile(0.5 * (1.0 + level));
  const double half = z * vstar_norm / std::sqrt(static_cast<double>(n));
  return {theta_hat - half, theta_hat + half};
}

// ---------------------------------------------------------------------------
// Asymptotic linear representation check under the oracle.

struct AlrDraw {
  double lhs = 0.0;  // (theta_hat - theta_{L,0}) / ||v*||_w
  double rhs = 0.0;  // -(1/n) sum (M u*)' H^{-1} g(Z_i, alpha_{L,0})
  double scaled_gap = 0.0;
};

// The first-order expansion alpha_hat - alpha_0 = -Omega^{-1} M' H^{-1} gbar
// gives the influence terms below (note the sign).
inline AlrDraw alr_draw(const Dataset& data, const FitConfig& cfg, const ParamPoint& alpha0, const RieszData& rz,
                        const PopulationProblem& p, const FitResult& fit) {
  // Population-whitened instruments so H and M match the oracle objects.
  const SampleDesign d = make_design(data, p.bases, cfg.tau);
  const Mat g = d.moments(alpha0);
  const Vec infl_dir = rz.h_l.ldlt().solve(rz.g_jacobian * rz.ustar);
  const Vec terms = g * infl_dir;
  AlrDraw a;
  a.lhs = (fit.alpha_hat.theta - alpha0.theta) / rz.vstar_norm;
  a.rhs = -terms.mean();
  a.scaled_gap = std::sqrt(static_cast<double>(data.n())) * (a.lhs - a.rhs);
  return a;
}

struct AlrReport {
  std::vector<std::size_t> n_values;
  std::vector<double> median_abs_gap;
  std::vector<double> rhs_var;      // variance of sqrt(n) rhs
  std::vector<double> rhs_mean;     // mean of sqrt(n) rhs
  std::vector<double> rhs_sd;
  std::vector<std::vector<AlrDraw>> draws;
  int reps = 0;
};

inline AlrReport alr_check(const Oracle& oracle, const FitConfig& cfg, const std::vector<std::size_t>& n_values, int reps,
                           std::uint64_t master_seed) {
  const PopulationProblem p = make_population_problem(oracle, cfg);
  const PseudoTrueResult pt = pseudo_true(p, cfg);
  const RieszData rz = build_m_l_oracle(pt.alpha, p);
  AlrReport rep;
  rep.reps = reps;
  for (std::size_t n : n_values) {
    std::vector<AlrDraw> ds;
    for (int r = 0; r < reps; ++r) {
      const Dataset data = simulate(oracle.spec(), n, stream_seed(master_seed, static_cast<std::uint64_t>(r) + 1000003ULL * n));
      FitConfig c = cfg;
      c.seed = stream_seed(master_seed, static_cast<std::uint64_t>(r));
      const FitResult fit = psgel_fit(data, c);
      ds.push_back(alr_draw(data, c, pt.alpha, rz, p, fit));
    }
    std::vector<double> gaps, rhs;
    for (const auto& d : ds) {
      gaps.push_back(std::abs(d.scaled_gap));
      rhs.push_back(std::sqrt(static_cast<double>(n)) * d.rhs);
    }
    const double m = std::accumulate(rhs.begin(), rhs.end(), 0.0) / std::max<std::size_t>(1, rhs.size());
    double v = 0.0;
    for (double x : rhs) v += (x - m) * (x - m);
    v /= std::max<std::size_t>(1, rhs.size() - 1);
    rep.n_values.push_back(n);
    rep.median_abs_gap.push_back(detail::quantile_sorted(gaps, 0.5));
    rep.rhs_mean.push_back(m);
    rep.rhs_var.push_back(v);
    rep.rhs_sd.push_back(std::sqrt(v));
    rep.draws.push_back(std::move(ds));
  }
  return rep;
}

}  // namespace psgel
