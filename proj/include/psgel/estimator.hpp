#pragma once

// PSGEL outer minimization (unrestricted and theta-restricted), the
// population pseudo-true value and effective-sieve diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <boost/math/tools/minima.hpp>

#include "psgel/dgp.hpp"
#include "psgel/error.hpp"
#include "psgel/gel.hpp"
#include "psgel/moments.hpp"
#include "psgel/numeric.hpp"
#include "psgel/sieve.hpp"

namespace psgel {

struct FitConfig {
  SieveSpec sieve{};
  GelKind family = GelKind::EL;
  double tau = 0.5;
  double theta_lo = -10.0;
  double theta_hi = 10.0;
  // Smoothing bandwidths are these multiples of n^{-1/5} sd(y); an exact stage follows.
  std::vector<double> bandwidth_steps{4.0, 2.0, 1.0, 0.5, 0.25};
  int multistart = 3;
  double outer_tol = 1e-10;
  std::uint64_t seed = 1;
  int stage_max_evals = 300;
  int polish_rounds = 6;
  double mu_scale = 16.0;
  InnerOptions inner{};

  void validate() const {
    sieve.validate();
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("fit: tau must lie in (0,1)");
    if (!(std::isfinite(theta_lo) && std::isfinite(theta_hi) && theta_lo < theta_hi))
      throw ConfigError("fit: theta_box must be a bounded nonempty interval");
    for (std::size_t i = 0; i < bandwidth_steps.size(); ++i) {
      if (!(bandwidth_steps[i] > 0.0)) throw ConfigError("fit: bandwidth steps must be positive");
      if (i > 0 && !(bandwidth_steps[i] < bandwidth_steps[i - 1]))
        throw ConfigError("fit: smoothing schedule must be strictly decreasing");
    }
    if (multistart < 1) throw ConfigError("fit: multistart must be >= 1");
    if (stage_max_evals < 1) throw ConfigError("fit: stage_max_evals must be >= 1");
    if (polish_rounds < 0) throw ConfigError("fit: polish_rounds must be >= 0");
    if (!(mu_scale > 0.0)) throw ConfigError("fit: mu_scale must be positive");
  }

  WeightFn weight() const { return WeightFn::quartic(mu_scale); }
};

struct StartTrace {
  std::string label;
  ParamPoint start;
  double start_exact = kInf;
  std::vector<double> stage_exact;  // exact criterion at the end of each smoothed stage
  double final_exact = kInf;
  int evaluations = 0;
  bool duplicate = false;  // merged with an earlier start after the first stage
};

struct FitResult {
  ParamPoint alpha_hat;
  double criterion = kInf;  // sup_lambda S_hat + gamma Pen at the exact indicator
  double gel_value = kInf;
  double pen_value = 0.0;
  InnerSolution inner;
  std::vector<StartTrace> trace;
  std::vector<double> bandwidths;
  bool restricted = false;
  bool boundary_hit = false;
  bool multistart_disagreement = false;
  bool below_identification_floor = false;
  int evaluations = 0;
  int rejected_candidates = 0;
  // Probe points for the penalty bound check (zero function and pilot).
  std::vector<std::pair<std::string, ParamPoint>> probes;
  std::vector<double> probe_criteria;
};

inline Bases make_bases(const FitConfig& cfg, const Dataset& data) {
  Bases b;
  b.h = build_h_basis(cfg.sieve);
  b.q = build_q_basis(cfg.sieve, data);
  b.mu = cfg.weight();
  return b;
}

inline Bases make_population_bases(const FitConfig& cfg) {
  Bases b;
  b.h = build_h_basis(cfg.sieve);
  b.q = build_q_basis_population(cfg.sieve);
  b.mu = cfg.weight();
  return b;
}

// Profile criterion sup_lambda S_hat(alpha, lambda) + gamma Pen(alpha).
class Criterion {
 public:
  Criterion(SampleDesign design, const FitConfig& cfg, Mat penalty)
      : design_(std::move(design)), fam_(s_family(cfg.family)), inner_(cfg.inner), gamma_(cfg.sieve.gamma_k),
        d_(std::move(penalty)) {}

  const SampleDesign& design() const { return design_; }
  const Mat& penalty() const { return d_; }
  double gamma() const { return gamma_; }
  const GelFamily& family() const { return fam_; }

  double pen(const ParamPoint& a) const { return a.pi.dot(d_ * a.pi); }

  InnerSolution inner(const ParamPoint& a, double bandwidth = 0.0) const {
    design_.fill(a, bandwidth, work_);
    return inner_maximize(work_, fam_, inner_);
  }

  double operator()(const ParamPoint& a, double bandwidth = 0.0) const {
    ++evaluations_;
    const auto sol = inner(a, bandwidth);
    if (!std::isfinite(sol.value)) {
      ++rejected_;
      return kInf;
    }
    return sol.value + gamma_ * pen(a);
  }

  int evaluations() const { return evaluations_; }
  int rejected() const { return rejected_; }

 private:
  SampleDesign design_;
  GelFamily fam_;
  InnerOptions inner_;
  double gamma_;
  Mat d_;
  mutable Mat work_;
  mutable int evaluations_ = 0;
  mutable int rejected_ = 0;
};

// ---------------------------------------------------------------------------
// Derivative-free minimizers.

struct NmResult {
  Vec x;
  double f = kInf;
  int evaluations = 0;
};

template <class F>
NmResult nelder_mead(F&& f, const Vec& x0, const Vec& step, int max_evals, double ftol = 1e-12,
                     double xtol = 1e-9) {
  const Eigen::Index d = x0.size();
  std::vector<Vec> pts(static_cast<std::size_t>(d + 1), x0);
  std::vector<double> fv(pts.size());
  int evals = 0;
  auto eval = [&](const Vec& x) {
    ++evals;
    const double v = f(x);
    return std::isnan(v) ? kInf : v;
  };
  for (Eigen::Index i = 0; i < d; ++i) pts[static_cast<std::size_t>(i + 1)](i) += step(i);
  for (std::size_t i = 0; i < pts.size(); ++i) fv[i] = eval(pts[i]);
  std::vector<std::size_t> order(pts.size());
  while (evals < max_evals) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
    const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];
    double diam = 0.0;
    for (std::size_t i = 0; i < pts.size(); ++i) diam = std::max(diam, (pts[i] - pts[best]).cwiseAbs().maxCoeff());
    if (std::isfinite(fv[worst]) && fv[worst] - fv[best] <= ftol * (1.0 + std::abs(fv[best])) && diam <= xtol)
      break;
    if (diam <= xtol * 1e-3) break;
    Vec centroid = Vec::Zero(d);
    for (std::size_t i = 0; i < pts.size(); ++i)
      if (i != worst) centroid += pts[i];
    centroid /= static_cast<double>(d);
    const Vec xr = centroid + (centroid - pts[worst]);
    const double fr = eval(xr);
    if (fr < fv[best]) {
      const Vec xe = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = eval(xe);
      if (fe < fr) {
        pts[worst] = xe, fv[worst] = fe;
      } else {
        pts[worst] = xr, fv[worst] = fr;
      }
      continue;
    }
    if (fr < fv[second]) {
      pts[worst] = xr, fv[worst] = fr;
      continue;
    }
    const bool outside = fr < fv[worst];
    const Vec xc = outside ? Vec(centroid + 0.5 * (xr - centroid)) : Vec(centroid + 0.5 * (pts[worst] - centroid));
    const double fc = eval(xc);
    if (fc < (outside ? fr : fv[worst])) {
      pts[worst] = xc, fv[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i == best) continue;
      pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
      fv[i] = eval(pts[i]);
    }
  }
  const auto it = std::min_element(fv.begin(), fv.end());
  NmResult r;
  r.x = pts[static_cast<std::size_t>(it - fv.begin())];
  r.f = *it;
  r.evaluations = evals;
  return r;
}

// Coordinate-wise pattern search for piecewise-constant objectives.
template <class F>
NmResult coordinate_polish(F&& f, Vec x, double fx, double delta, int rounds) {
  static constexpr double kMult[] = {-2.0, -1.0, -0.5, 0.5, 1.0, 2.0};
  NmResult r;
  for (int rd = 0; rd < rounds; ++rd, delta *= 0.5) {
    for (Eigen::Index c = 0; c < x.size(); ++c) {
      Vec best = x;
      double fb = fx;
      for (double m : kMult) {
        Vec y = x;
        y(c) += m * delta;
        ++r.evaluations;
        const double fy = f(y);
        if (fy < fb) best = y, fb = fy;
      }
      x = best, fx = fb;
    }
  }
  r.x = std::move(x);
  r.f = fx;
  return r;
}

// ---------------------------------------------------------------------------

namespace detail {

inline double sample_sd(const Vec& v) {
  const double m = v.mean();
  return std::sqrt((v.array() - m).square().sum() / std::max<Eigen::Index>(1, v.size() - 1));
}

inline double quantile_sorted(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  if (v.empty()) return 0.0;
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

// Coefficients of the constant function 1 in the h-basis.
inline Vec constant_coefficients(const HBasis& hb) {
  const int k = hb.size();
  Vec v(k);
  const Mat rhs = integrate_matrix(hb.basis.breakpoints(), k, 1, [&](double w, double wt, Mat& m) {
    hb.basis.eval(w, v.data());
    m.col(0).noalias() += wt * v;
  });
  return hb.gram0.ldlt().solve(rhs.col(0));
}

}  // namespace detail

// Ridge regression of Y on phi^K(W), shifted so the residual tau-quantile is zero;
// theta is the plug-in mean of mu(W) h'(W).
inline ParamPoint pilot_start(const SampleDesign& d, const HBasis& hb, double tau) {
  const int k = d.k();
  Mat xtx = d.phi.transpose() * d.phi;
  const double ridge = 1e-8 * std::max(xtx.trace(), 1e-300);
  xtx.diagonal().array() += ridge;
  Vec pi = xtx.ldlt().solve(d.phi.transpose() * d.y);
  const Vec resid = d.y - d.phi * pi;
  std::vector<double> r(resid.data(), resid.data() + resid.size());
  const double shift = detail::quantile_sorted(r, tau);
  const Vec c = detail::constant_coefficients(hb);
  if (c.allFinite() && k > 0) pi += shift * c;
  ParamPoint a;
  a.pi = pi;
  a.theta = (d.dphi * pi).mean();
  return a;
}

namespace detail {

struct Start {
  std::string label;
  ParamPoint point;
};

inline double clamp_theta(double t, const FitConfig& cfg) { return std::clamp(t, cfg.theta_lo, cfg.theta_hi); }

// Shared driver. When `nu` is set theta is frozen and only pi is searched.
inline FitResult fit_impl(const Dataset& data, const FitConfig& cfg, std::optional<double> nu,
                          const std::vector<ParamPoint>& extra_starts) {
  cfg.validate();
  data.validate();
  if (nu && !(*nu >= cfg.theta_lo && *nu <= cfg.theta_hi)) throw ConfigError("restricted fit: nu outside theta_box");
  const Bases bases = make_bases(cfg, data);
  Criterion crit(make_design(data, bases, cfg.tau), cfg, penalty_matrix(cfg.sieve, bases.h));
  const SampleDesign& d = crit.design();
  const int k = d.k();
  const double n = static_cast<double>(d.n());

  FitResult res;
  res.restricted = nu.has_value();
  res.below_identification_floor = !(d.n() > static_cast<std::size_t>(d.j() + k + 2));
  const double scale = std::pow(n, -0.2) * std::max(detail::sample_sd(d.y), 1e-12);
  for (double m : cfg.bandwidth_steps) res.bandwidths.push_back(m * scale);

  auto to_point = [&](const Vec& x) {
    if (nu) return ParamPoint{*nu, x};
    return ParamPoint{x(0), x.tail(k)};
  };
  auto to_vec = [&](const ParamPoint& a) -> Vec {
    if (nu) return a.pi;
    return a.packed();
  };
  auto objective = [&](double bw) {
    return [&, bw](const Vec& x) {
      const ParamPoint a = to_point(x);
      if (!(a.theta >= cfg.theta_lo && a.theta <= cfg.theta_hi)) return kInf;
      return crit(a, bw);
    };
  };

  // Starts: zero function, pilot, caller-supplied warm starts, random perturbations.
  const ParamPoint pilot = pilot_start(d, bases.h, cfg.tau);
  std::vector<Start> starts;
  ParamPoint zero{0.0, Vec::Zero(k)};
  ParamPoint pil = pilot;
  pil.theta = clamp_theta(pil.theta, cfg);
  if (nu) zero.theta = pil.theta = *nu;
  starts.push_back({"zero", zero});
  starts.push_back({"pilot", pil});
  res.probes = {{"zero", zero}, {"pilot", pil}};
  for (const auto& e : extra_starts) {
    ParamPoint s = e;
    s.theta = nu ? *nu : clamp_theta(s.theta, cfg);
    starts.push_back({"warm", s});
  }
  Rng rng(stream_seed(cfg.seed, nu ? 0x5EEDULL : 0x0ULL));
  const double spread = 0.25 * std::max(detail::sample_sd(d.y), 1e-3);
  for (int s = 2; s < cfg.multistart; ++s) {
    ParamPoint p = pil;
    for (int c = 0; c < k; ++c) p.pi(c) += spread * rng.normal();
    if (!nu) p.theta = clamp_theta(pil.theta + spread * rng.normal(), cfg);
    starts.push_back({"random", p});
  }
  // With multistart == 1 keep only the pilot (plus warm starts).
  if (cfg.multistart == 1) starts.erase(starts.begin());

  const auto exact = objective(0.0);
  for (const auto& pr : res.probes) res.probe_criteria.push_back(crit(pr.second, 0.0));

  // Minimizes the exact criterion over theta for fixed pi near `centre`; theta
  // enters only rho1, so the profile is smooth.
  auto profile = [&](const Vec& pi, double centre) {
    auto f = [&](double th) {
      const double v = crit(ParamPoint{th, pi}, 0.0);
      return std::isfinite(v) ? v : 1e10;
    };
    double w = 0.05 * std::max(1.0, std::abs(centre));
    std::pair<double, double> best{centre, f(centre)};
    for (int attempt = 0; attempt < 4; ++attempt) {
      const double lo = std::max(cfg.theta_lo, best.first - w);
      const double hi = std::min(cfg.theta_hi, best.first + w);
      std::uintmax_t iters = 60;
      auto r = boost::math::tools::brent_find_minima(f, lo, hi, 30, iters);
      if (r.second < best.second) best = r;
      const bool at_lo = best.first - lo < 0.02 * w && lo > cfg.theta_lo;
      const bool at_hi = hi - best.first < 0.02 * w && hi < cfg.theta_hi;
      if (!at_lo && !at_hi) break;
      w *= 4.0;
    }
    if (!(best.second < 1e10)) best.second = kInf;
    return best;
  };

  auto run_stage = [&](const Vec& x, double bw) {
    const Vec step = Vec::Constant(x.size(), std::max(bw, 1e-4));
    auto nm = nelder_mead(objective(bw), x, step, cfg.stage_max_evals, cfg.outer_tol, 1e-7);
    return std::isfinite(nm.f) ? nm.x : x;
  };

  // First stage from every start; later stages only for distinct endpoints.
  struct Track {
    Vec x, best_x;
    double best_f = kInf;
    int duplicate_of = -1;
  };
  std::vector<Track> tracks(starts.size());
  for (std::size_t i = 0; i < starts.size(); ++i) {
    StartTrace tr;
    tr.label = starts[i].label;
    tr.start = starts[i].point;
    const int before = crit.evaluations();
    Track& t = tracks[i];
    t.best_x = to_vec(starts[i].point);
    t.best_f = tr.start_exact = exact(t.best_x);
    t.x = t.best_x;
    if (!res.bandwidths.empty()) {
      t.x = run_stage(t.x, res.bandwidths.front());
      const double fe = exact(t.x);
      tr.stage_exact.push_back(fe);
      if (fe < t.best_f) t.best_f = fe, t.best_x = t.x;
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (tracks[j].duplicate_of < 0 &&
          (tracks[j].x - t.x).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + t.x.cwiseAbs().maxCoeff())) {
        t.duplicate_of = static_cast<int>(j);
        break;
      }
    }
    tr.evaluations = crit.evaluations() - before;
    res.trace.push_back(std::move(tr));
  }

  Vec best_x;
  double best_f = kInf;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    Track& t = tracks[i];
    StartTrace& tr = res.trace[i];
    if (t.duplicate_of >= 0) continue;
    const int before = crit.evaluations();
    for (std::size_t s = 1; s < res.bandwidths.size(); ++s) {
      t.x = run_stage(t.x, res.bandwidths[s]);
      const double fe = exact(t.x);
      tr.stage_exact.push_back(fe);
      if (fe < t.best_f) t.best_f = fe, t.best_x = t.x;
    }
    // Exact-indicator polish from the best exact iterate seen.
    const double delta = res.bandwidths.empty() ? 0.05 : res.bandwidths.back();
    NmResult pol;
    if (nu) {
      pol = coordinate_polish(exact, t.best_x, t.best_f, delta, cfg.polish_rounds);
    } else {
      // Search pi with theta profiled out so both fits polish the same coordinates.
      double th = t.best_x(0);
      auto prof = [&](const Vec& pi) { return profile(pi, th).second; };
      const Vec pi0 = t.best_x.tail(k);
      const auto p0 = profile(pi0, th);
      Vec x0(k + 1);
      x0 << p0.first, pi0;
      double f0 = p0.second;
      if (!(f0 <= t.best_f)) x0 = t.best_x, f0 = t.best_f;
      th = x0(0);
      auto pp = coordinate_polish(prof, Vec(x0.tail(k)), f0, delta, cfg.polish_rounds);
      const auto pf = profile(pp.x, th);
      pol.x.resize(k + 1);
      pol.x << pf.first, pp.x;
      pol.f = exact(pol.x);
      if (!(pol.f <= f0)) pol.x = x0, pol.f = f0;
    }
    tr.final_exact = pol.f;
    tr.evaluations += crit.evaluations() - before;
    if (pol.f < best_f || !best_x.size()) best_f = pol.f, best_x = pol.x;
  }
  for (std::size_t i = 0; i < starts.size(); ++i) {
    StartTrace& tr = res.trace[i];
    if (tracks[i].duplicate_of >= 0) {
      const StartTrace& src = res.trace[static_cast<std::size_t>(tracks[i].duplicate_of)];
      tr.stage_exact.insert(tr.stage_exact.end(), src.stage_exact.begin() + 1, src.stage_exact.end());
      tr.final_exact = std::min(src.final_exact, tr.start_exact);
      tr.duplicate = true;
    }
    // A start point must never beat the reported minimum.
    if (tr.start_exact < best_f) best_f = tr.start_exact, best_x = to_vec(starts[i].point);
  }
  res.evaluations = crit.evaluations();
  res.rejected_candidates = crit.rejected();
  if (!std::isfinite(best_f)) {
    if (!nu) throw EstimationError("all starts failed: criterion infinite at every candidate");
    // Under theta = nu an unbounded EL dual everywhere means the restricted
    // infimum itself is +inf; report it rather than failing.
    best_x = to_vec(starts.front().point);
  }

  res.alpha_hat = to_point(best_x);
  res.inner = crit.inner(res.alpha_hat, 0.0);
  res.gel_value = res.inner.value;
  res.pen_value = crit.pen(res.alpha_hat);
  res.criterion = res.gel_value + crit.gamma() * res.pen_value;
  res.boundary_hit = res.inner.boundary_hit;

  std::vector<double> finals;
  for (const auto& tr : res.trace) finals.push_back(tr.final_exact);
  std::sort(finals.begin(), finals.end());
  if (finals.size() >= 2 && std::isfinite(finals[1]))
    res.multistart_disagreement = finals[1] - finals[0] > 1e-4 * (1.0 + std::abs(finals[0]));
  return res;
}

}  // namespace detail

inline FitResult psgel_fit(const Dataset& data, const FitConfig& cfg, const std::vector<ParamPoint>& extra_starts = {}) {
  return detail::fit_impl(data, cfg, std::nullopt, extra_starts);
}

inline FitResult psgel_fit_restricted(const Dataset& data, const FitConfig& cfg, double nu,
                                      const std::vector<ParamPoint>& extra_starts = {}) {
  return detail::fit_impl(data, cfg, nu, extra_starts);
}

// Exact criterion at an arbitrary point, for diagnostics.
inline double criterion_at(const Dataset& data, const FitConfig& cfg, const ParamPoint& a) {
  const Bases bases = make_bases(cfg, data);
  Criterion crit(make_design(data, bases, cfg.tau), cfg, penalty_matrix(cfg.sieve, bases.h));
  return crit(a, 0.0);
}

// gamma Pen(alpha_hat) <= sup_lambda S_hat(alpha) + gamma Pen(alpha) at every probe.
inline bool penalty_bound_holds(const FitResult& r, double gamma, double tol = 1e-12) {
  for (double c : r.probe_criteria)
    if (gamma * r.pen_value > c + tol) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Population problem under the oracle: Q_J(alpha) = E g' H0^{-1} E g with
// H0 = H_J(alpha_0, P) at the true (theta0, h0).

struct PopulationProblem {
  const Oracle* oracle = nullptr;
  Bases bases;
  PopulationGrid grid;
  Mat h0;        // H_J(alpha_0, P)
  Mat h0_inv;
  Mat penalty;
  double gamma = 0.0;
  double theta0 = 0.0;
  bool ridged = false;

  double q_j(const ParamPoint& a) const {
    const Vec g = population_g(a, grid);
    return g.dot(h0_inv * g);
  }
  double pen(const ParamPoint& a) const { return a.pi.dot(penalty * a.pi); }
  double q_bar(const ParamPoint& a) const { return q_j(a) + gamma * pen(a); }

  // Gradient of q_bar in packed coordinates.
  Vec q_bar_grad(const ParamPoint& a) const {
    const Vec g = population_g(a, grid);
    const Mat jac = population_jacobian(a, grid);
    Vec grad = 2.0 * jac.transpose() * (h0_inv * g);
    grad.tail(a.pi.size()) += 2.0 * gamma * (penalty * a.pi);
    return grad;
  }
};

// H_J at the true alpha_0, where h0 need not lie in the sieve.
inline Mat population_h_true(const PopulationGrid& g, const Oracle& o, const WeightFn& mu, double theta0) {
  const double tau = o.tau();
  const Eigen::Index n = g.size();
  const int j = static_cast<int>(g.q.cols());
  Vec rho1(n), er2(n), er22(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = g.w(i);
    rho1(i) = theta0 - mu.mu(w) * o.dh0(w);
    const double f = o.cdf_y_given_xv(o.h0(w), w, g.v(i));
    er2(i) = f - tau;
    er22(i) = f * (1.0 - 2.0 * tau) + tau * tau;
  }
  Mat out(j + 1, j + 1);
  out(0, 0) = g.wt.dot(rho1.cwiseProduct(rho1));
  const Vec c = (g.wt.array() * rho1.array() * er2.array()).matrix();
  out.block(1, 0, j, 1) = g.q.transpose() * c;
  out.block(0, 1, 1, j) = out.block(1, 0, j, 1).transpose();
  out.block(1, 1, j, j) = g.q.transpose() * (g.wt.array() * er22.array()).matrix().asDiagonal() * g.q;
  return 0.5 * (out + out.transpose());
}

inline PopulationProblem make_population_problem(const Oracle& oracle, const FitConfig& cfg,
                                                 std::size_t nodes = 96) {
  cfg.validate();
  if (std::abs(oracle.tau() - cfg.tau) > 0.0) throw ConfigError("population problem: tau mismatch with the design");
  PopulationProblem p;
  p.oracle = &oracle;
  p.bases = make_population_bases(cfg);
  p.grid = make_population_grid(oracle, p.bases, nodes);
  p.theta0 = oracle_theta0(oracle.spec(), p.bases.mu).value;
  p.h0 = population_h_true(p.grid, oracle, p.bases.mu, p.theta0);
  Eigen::SelfAdjointEigenSolver<Mat> es(p.h0);
  const double emin = es.eigenvalues().minCoeff();
  Mat h = p.h0;
  if (!(emin > 1e-12 * std::max(1.0, p.h0.trace()))) {
    h.diagonal().array() += 1e-10 * p.h0.trace();
    p.ridged = true;
  }
  p.h0_inv = h.ldlt().solve(Mat::Identity(h.rows(), h.cols()));
  p.h0_inv = 0.5 * (p.h0_inv + p.h0_inv.transpose());
  p.penalty = penalty_matrix(cfg.sieve, p.bases.h);
  p.gamma = cfg.sieve.gamma_k;
  return p;
}

struct PseudoTrueResult {
  ParamPoint alpha;
  double q_bar = kInf;
  double q_j = kInf;
  double grad_norm = kInf;
  int iterations = 0;
};

namespace detail {

// BFGS with Armijo backtracking, theta projected onto the box.
inline PseudoTrueResult bfgs_population(const PopulationProblem& p, const FitConfig& cfg, ParamPoint start,
                                        int max_iter = 500) {
  const int k = start.k();
  Vec x = start.packed();
  x(0) = std::clamp(x(0), cfg.theta_lo, cfg.theta_hi);
  auto f = [&](const Vec& v) { return p.q_bar(ParamPoint::unpack(v)); };
  auto g = [&](const Vec& v) { return p.q_bar_grad(ParamPoint::unpack(v)); };
  auto projected = [&](const Vec& v, const Vec& gr) {
    Vec pg = gr;
    if ((v(0) <= cfg.theta_lo && gr(0) > 0.0) || (v(0) >= cfg.theta_hi && gr(0) < 0.0)) pg(0) = 0.0;
    return pg;
  };
  // Gauss-Newton curvature as the initial inverse Hessian.
  const ParamPoint a0 = ParamPoint::unpack(x);
  const Mat jac = population_jacobian(a0, p.grid);
  Mat b0 = 2.0 * jac.transpose() * p.h0_inv * jac;
  b0.bottomRightCorner(k, k) += 2.0 * p.gamma * p.penalty;
  b0.diagonal().array() += 1e-10 * std::max(1.0, b0.trace());
  Mat hinv = b0.ldlt().solve(Mat::Identity(k + 1, k + 1));
  double fx = f(x);
  Vec gx = g(x);
  PseudoTrueResult r;
  int it = 0;
  for (; it < max_iter; ++it) {
    const Vec pg = projected(x, gx);
    if (pg.norm() <= 1e-12) break;
    Vec dir = -hinv * gx;
    if (gx.dot(dir) >= 0.0) {
      hinv = Mat::Identity(k + 1, k + 1);
      dir = -gx;
    }
    double step = 1.0;
    Vec xn;
    double fn = kInf;
    for (int bt = 0; bt < 60; ++bt) {
      xn = x + step * dir;
      xn(0) = std::clamp(xn(0), cfg.theta_lo, cfg.theta_hi);
      fn = f(xn);
      if (fn <= fx + 1e-4 * gx.dot(xn - x)) break;
      step *= 0.5;
    }
    if (!(fn <= fx)) break;
    const Vec gn = g(xn);
    const Vec s = xn - x;
    const Vec y = gn - gx;
    const double sy = s.dot(y);
    if (sy > 1e-300) {
      const double rho = 1.0 / sy;
      const Mat eye = Mat::Identity(k + 1, k + 1);
      hinv = (eye - rho * s * y.transpose()) * hinv * (eye - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    const bool tiny = std::abs(fx - fn) <= 1e-18 * (1.0 + std::abs(fx)) && s.norm() <= 1e-14;
    x = xn, fx = fn, gx = gn;
    if (tiny) break;
  }
  r.alpha = ParamPoint::unpack(x);
  r.q_bar = fx;
  r.q_j = p.q_j(r.alpha);
  r.grad_norm = projected(x, gx).norm();
  r.iterations = it;
  return r;
}

}  // namespace detail

// alpha_{L,0}: minimizer of Q_J + gamma Pen over the sieve.
inline PseudoTrueResult pseudo_true(const PopulationProblem& p, const FitConfig& cfg) {
  const int k = p.bases.k();
  std::vector<ParamPoint> starts;
  starts.push_back({p.theta0, project_h0(*p.oracle, p.bases.h)});
  starts.push_back({0.0, Vec::Zero(k)});
  Rng rng(stream_seed(cfg.seed, 0xA10ULL));
  for (int s = 2; s < cfg.multistart; ++s) {
    ParamPoint q = starts.front();
    for (int c = 0; c < k; ++c) q.pi(c) += 0.25 * rng.normal();
    starts.push_back(q);
  }
  PseudoTrueResult best;
  for (const auto& s : starts) {
    auto r = detail::bfgs_population(p, cfg, s);
    if (r.q_bar < best.q_bar) best = r;
  }
  if (!std::isfinite(best.q_bar)) throw EstimationError("pseudo_true: optimizer failed");
  return best;
}

inline PseudoTrueResult pseudo_true(const Oracle& oracle, const FitConfig& cfg) {
  return pseudo_true(make_population_problem(oracle, cfg), cfg);
}

struct EffectiveSieveBound {
  double gamma_big = 0.0;   // Gamma_{L,n}
  double gbar0_sq = 0.0;    // gbar^2_{L,0}
  double mho = 0.0;         // l_n Gamma / gamma_K
  double l_n = 0.0;
  double theta_bar = 0.0;
  double mu_dh_norm_sq = 0.0;
  double b2j_sq = 0.0;
  double moment_norm_sq = 0.0;  // ||E g(Pi_K alpha_0)||^2
  double pen_term = 0.0;        // gamma Pen(Pi_K alpha_0)
  bool mho_infinite = false;
};

inline EffectiveSieveBound effective_sieve(const PopulationProblem& p, const FitConfig& cfg, std::size_t n) {
  if (n < 3) throw ConfigError("effective_sieve: n must be >= 3 for log log n");
  EffectiveSieveBound e;
  const ParamPoint proj{p.theta0, project_h0(*p.oracle, p.bases.h)};
  e.theta_bar = std::max(std::abs(cfg.theta_lo), std::abs(cfg.theta_hi));
  // ||mu (Pi_K h0)'||^2 under P_W and E||q||^2 on the population grid.
  const Vec mdh = p.grid.dphi * proj.pi;
  e.mu_dh_norm_sq = p.grid.wt.dot(mdh.cwiseProduct(mdh));
  // E||q||^2 = tr(W G W') with G the U(0,1) Gram of the raw basis, by the same rule as the whitener.
  const QBasis& qb = p.bases.q;
  const int j = qb.size();
  Vec r(j);
  const Mat gram = detail::integrate_matrix(qb.raw.breakpoints(), j, j, [&](double x, double wt, Mat& m) {
    qb.raw.eval(x, r.data());
    m.noalias() += wt * r * r.transpose();
  });
  e.b2j_sq = (qb.whitener * gram * qb.whitener.transpose()).trace();
  e.gbar0_sq = e.theta_bar + e.mu_dh_norm_sq + e.b2j_sq;
  e.moment_norm_sq = population_g(proj, p.grid).squaredNorm();
  e.pen_term = p.gamma * p.pen(proj);
  e.gamma_big = e.gbar0_sq / static_cast<double>(n) + e.moment_norm_sq + e.pen_term;
  e.l_n = std::log(std::log(static_cast<double>(n)));
  if (p.gamma > 0.0) {
    e.mho = e.l_n * e.gamma_big / p.gamma;
  } else {
    e.mho = kInf;
    e.mho_infinite = true;
  }
  return e;
}

}  // namespace psgel
