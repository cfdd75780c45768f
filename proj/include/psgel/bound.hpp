#pragma once

// Discretized conditional-density operator T, the efficiency bound V0, and
// the curvature diagnostics of the population GMM criterion.

#include <algorithm>
#include <cmath>
#include <vector>

#include "psgel/dgp.hpp"
#include "psgel/error.hpp"
#include "psgel/estimator.hpp"
#include "psgel/numeric.hpp"

namespace psgel {

// Quadrature grids on the probit scale: w = Phi(z) with z ~ N(0, s^2) for W
// and x = Phi(t) with t ~ N(0,1) for X.
struct OperatorGrid {
  std::vector<double> w_nodes, x_nodes;
  std::vector<double> dw;          // Lebesgue weights in w
  Vec pw_weights;                  // P_W weights, p_W(w_j) dw_j
  Vec px_weights;                  // P_X weights
  Mat t_matrix;                    // |x| x |w|
  Mat t_adjoint;                   // |w| x |x|, (T* f)(w_j) = sum_i t_adjoint(j,i) f(x_i)

  std::size_t nw() const { return w_nodes.size(); }
  std::size_t nx() const { return x_nodes.size(); }

  Vec apply(const Vec& g) const { return t_matrix * g; }
  Vec apply_adjoint(const Vec& f) const { return t_adjoint * f; }

  double inner_x(const Vec& a, const Vec& b) const { return (px_weights.array() * a.array() * b.array()).sum(); }
  double inner_w(const Vec& a, const Vec& b) const { return (pw_weights.array() * a.array() * b.array()).sum(); }

  // T in L2-orthonormal coordinates: diag(sqrt px) T diag(1/sqrt pw).
  Mat weighted() const {
    return px_weights.cwiseSqrt().asDiagonal() * t_matrix * pw_weights.cwiseSqrt().cwiseInverse().asDiagonal();
  }
};

inline OperatorGrid build_operator(const Oracle& oracle, std::size_t nw = 96, std::size_t nx = 96) {
  if (!(oracle.spec().b > 0.0)) throw ConfigError("build_operator: the design needs latent mixing b > 0");
  if (nw < 2 || nx < 2) throw ConfigError("build_operator: grid sizes must be >= 2");
  const double s = oracle.w_scale();
  const auto rw = gauss_legendre(nw, -6.0 * s, 6.0 * s);
  const auto rx = gauss_legendre(nx, -6.0, 6.0);
  OperatorGrid op;
  op.w_nodes.resize(nw);
  op.dw.resize(nw);
  op.pw_weights.resize(static_cast<Eigen::Index>(nw));
  for (std::size_t j = 0; j < nw; ++j) {
    const double z = rw.nodes[j];
    op.w_nodes[j] = normal_cdf(z);
    op.dw[j] = normal_pdf(z) * rw.weights[j];
    // p_W(w) dw = phi(z/s)/s dz.
    op.pw_weights(static_cast<Eigen::Index>(j)) = normal_pdf(z / s) / s * rw.weights[j];
  }
  op.x_nodes.resize(nx);
  op.px_weights.resize(static_cast<Eigen::Index>(nx));
  for (std::size_t i = 0; i < nx; ++i) {
    op.x_nodes[i] = normal_cdf(rx.nodes[i]);
    op.px_weights(static_cast<Eigen::Index>(i)) = normal_pdf(rx.nodes[i]) * rx.weights[i];
  }
  const double a = oracle.spec().a, b = oracle.spec().b;
  op.t_matrix.resize(static_cast<Eigen::Index>(nx), static_cast<Eigen::Index>(nw));
  for (std::size_t i = 0; i < nx; ++i) {
    const double t = rx.nodes[i];
    for (std::size_t j = 0; j < nw; ++j) {
      const double z = rw.nodes[j];
      const double w = op.w_nodes[j];
      const double v = (z - a * t) / b;
      // p_{W|X}(w|x) dw = phi((z - a t)/b)/b dz; p_{Y|WX}(h0(w)|w,x) at the implied v.
      const double kernel = normal_pdf(v) / b * rw.weights[j];
      op.t_matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          oracle.pdf_y_given_xv(oracle.h0(w), w, v) * kernel;
    }
  }
  op.t_adjoint = op.pw_weights.cwiseInverse().asDiagonal() * op.t_matrix.transpose() * op.px_weights.asDiagonal();
  return op;
}

struct BoundResult {
  double v0 = 0.0;
  double eps_norm_sq = 0.0;
  double correction_sq = 0.0;
  Vec svd_spectrum;
  int truncation_index = 0;
  double threshold = 0.0;
  double range_residual = 0.0;      // ||(I - Proj) (ell - T* Gamma)|| in L2(P_W)
  double kernel_component = 0.0;   // ||ell||'s part in the numerical kernel of T
  double relative_range_residual = 0.0;
  bool unreliable = false;
  std::vector<double> picard_partial_sums;
  double spectrum_slope = 0.0;      // log-log slope of the retained singular values
};

// Gamma(x) = E[rho1 rho2 | X = x] / (tau (1 - tau)) on the x nodes.
inline Vec gamma_on_grid(const OperatorGrid& op, const Oracle& oracle, const WeightFn& mu, double theta0,
                         std::size_t nv = 64) {
  const auto gh = gauss_hermite_normal(nv);
  const double tau = oracle.tau();
  const double a = oracle.spec().a, b = oracle.spec().b;
  Vec out(static_cast<Eigen::Index>(op.nx()));
  for (std::size_t i = 0; i < op.nx(); ++i) {
    const double t = normal_quantile(op.x_nodes[i]);
    double acc = 0.0;
    for (std::size_t k = 0; k < nv; ++k) {
      const double v = gh.nodes[k];
      const double w = normal_cdf(a * t + b * v);
      const double rho1 = theta0 - mu.mu(w) * oracle.dh0(w);
      acc += gh.weights[k] * rho1 * (oracle.cdf_y_given_xv(oracle.h0(w), w, v) - tau);
    }
    out(static_cast<Eigen::Index>(i)) = acc / (tau * (1.0 - tau));
  }
  return out;
}

struct OperatorSvd {
  Mat u, v;
  Vec sigma;
};

inline OperatorSvd operator_svd(const OperatorGrid& op) {
  Eigen::BDCSVD<Mat> svd(op.weighted(), Eigen::ComputeThinU | Eigen::ComputeThinV);
  return {svd.matrixU(), svd.matrixV(), svd.singularValues()};
}

// Number of singular values with sigma^2 > threshold * sigma_max^2.
inline int truncation_count(const Vec& sigma, double threshold) {
  int k = 0;
  const double smax = sigma.size() ? sigma(0) : 0.0;
  while (k < sigma.size() && sigma(k) * sigma(k) > threshold * smax * smax) ++k;
  return k;
}

// Range projection P = T (T*T)^+ T* in orthonormal x-coordinates.
inline Mat range_projection(const OperatorSvd& svd, int k) {
  const Mat uk = svd.u.leftCols(k);
  return uk * uk.transpose();
}

// V0 = ||eps||^2 + ||T (T*T)^+ [ell - T* Gamma]||^2. If keep > 0 it overrides the threshold.
inline BoundResult v0_bound(const OperatorGrid& op, const Oracle& oracle, const WeightFn& mu, double threshold = 1e-8,
                            int keep = -1, const OperatorSvd* pre = nullptr) {
  const double tau = oracle.tau();
  const double theta0 = oracle_theta0(oracle.spec(), mu).value;
  const Vec gam = gamma_on_grid(op, oracle, mu, theta0);
  const Eigen::Index nw = static_cast<Eigen::Index>(op.nw());
  Vec ell(nw), rho1sq(nw);
  for (Eigen::Index j = 0; j < nw; ++j) {
    const double w = op.w_nodes[static_cast<std::size_t>(j)];
    ell(j) = oracle.ell(w, mu);
    const double r1 = theta0 - mu.mu(w) * oracle.dh0(w);
    rho1sq(j) = r1 * r1;
  }
  BoundResult res;
  // E[rho2^2 | X] = tau (1 - tau), so E[eps^2] = E[rho1^2] - tau (1 - tau) E[Gamma^2].
  res.eps_norm_sq = op.pw_weights.dot(rho1sq) - tau * (1.0 - tau) * op.px_weights.dot(gam.cwiseProduct(gam));
  const Vec r = ell - op.apply_adjoint(gam);
  const Vec rt = (op.pw_weights.cwiseSqrt().array() * r.array()).matrix();
  const Vec lt = (op.pw_weights.cwiseSqrt().array() * ell.array()).matrix();
  const OperatorSvd svd = pre ? *pre : operator_svd(op);
  res.svd_spectrum = svd.sigma;
  res.threshold = threshold;
  const int k = keep >= 0 ? std::min<int>(keep, static_cast<int>(svd.sigma.size())) : truncation_count(svd.sigma, threshold);
  res.truncation_index = k;
  const Vec coef = svd.v.leftCols(k).transpose() * rt;
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    const double c = coef(i) / svd.sigma(i);
    acc += c * c;
    res.picard_partial_sums.push_back(acc);
  }
  res.correction_sq = acc;
  res.v0 = res.eps_norm_sq + res.correction_sq;
  res.range_residual = (rt - svd.v.leftCols(k) * coef).norm();
  res.relative_range_residual = res.range_residual / std::max(rt.norm(), 1e-300);
  res.kernel_component = (lt - svd.v.leftCols(k) * (svd.v.leftCols(k).transpose() * lt)).norm();
  res.unreliable = res.relative_range_residual > 1e-3;
  if (k >= 3) {
    // Least-squares slope of log sigma_i against log i.
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int i = 0; i < k; ++i) {
      const double lx = std::log(i + 1.0), ly = std::log(svd.sigma(i));
      sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly;
    }
    res.spectrum_slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Population GMM criterion and curvature.

inline double q_j_criterion(const ParamPoint& a, const PopulationProblem& p) { return p.q_j(a); }

// Eigenvalue range of H_J(alpha_0, P) giving c^{-1} |g|^2 <= Q_J <= c |g|^2.
inline double sandwich_constant(const PopulationProblem& p) {
  Eigen::SelfAdjointEigenSolver<Mat> es(p.h0);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  return std::max(hi, 1.0 / lo);
}

struct CurvatureReport {
  std::vector<std::pair<std::string, double>> q_j_values;
  std::vector<std::pair<double, double>> varpi_samples;  // (t, varpi(t))
  std::vector<double> shell_minima;                       // raw shell minima before the exterior sweep
  double i_l_min_eig = 0.0;
  Mat i_l;
  double arc_min_eig = 0.0;  // smallest e_min over Hessians at the shell minimizers
  bool heuristic = true;     // exterior infimum searched on shell boundaries only
  std::vector<double> missing_t;
};

namespace detail {

// Metric ||alpha||^2 = theta^2 + ||h||^2_{L2(Leb)} = a' M a.
inline Mat param_metric(const PopulationProblem& p) {
  const int k = p.bases.k();
  Mat m = Mat::Zero(k + 1, k + 1);
  m(0, 0) = 1.0;
  m.bottomRightCorner(k, k) = p.bases.h.gram0;
  return m;
}

// Central-difference Hessian of q_bar via its analytic gradient, in coordinates b = R' a.
inline Mat orthonormal_hessian(const PopulationProblem& p, const ParamPoint& at, const Mat& r_inv_t,
                               double step = 1e-5) {
  const Eigen::Index d = at.k() + 1;
  Mat h(d, d);
  const Vec a0 = at.packed();
  for (Eigen::Index c = 0; c < d; ++c) {
    const Vec dir = r_inv_t.col(c);
    const Vec gp = r_inv_t.transpose() * p.q_bar_grad(ParamPoint::unpack(a0 + step * dir));
    const Vec gm = r_inv_t.transpose() * p.q_bar_grad(ParamPoint::unpack(a0 - step * dir));
    h.col(c) = (gp - gm) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

}  // namespace detail

// varpi(t) = inf over ||alpha - alpha_{L,0}|| >= t of Qbar(alpha) - Qbar(alpha_{L,0}).
inline CurvatureReport varpi_profile(const PopulationProblem& p, const FitConfig& cfg, const ParamPoint& alpha0,
                                     const std::vector<double>& t_grid, int multistart = 6) {
  CurvatureReport rep;
  const int k = alpha0.k();
  const Eigen::Index d = k + 1;
  const Mat metric = detail::param_metric(p);
  Eigen::LLT<Mat> llt(metric);
  const Mat r = llt.matrixL();  // metric = r r'
  const Mat r_inv_t = r.transpose().triangularView<Eigen::Upper>().solve(Mat::Identity(d, d));
  const double q0 = p.q_bar(alpha0);

  rep.q_j_values.push_back({"pseudo_true", p.q_j(alpha0)});
  rep.q_j_values.push_back({"zero", p.q_j(ParamPoint{0.0, Vec::Zero(k)})});
  rep.q_j_values.push_back({"projection", p.q_j(ParamPoint{p.theta0, project_h0(*p.oracle, p.bases.h)})});

  const Mat hess = detail::orthonormal_hessian(p, alpha0, r_inv_t);
  rep.i_l = 0.5 * hess;
  Eigen::SelfAdjointEigenSolver<Mat> es(rep.i_l);
  rep.i_l_min_eig = es.eigenvalues().minCoeff();
  rep.arc_min_eig = rep.i_l_min_eig;

  // Point on the shell of radius t in direction u (orthonormal coordinates).
  auto shell_point = [&](const Vec& u, double t) {
    const Vec a = alpha0.packed() + t * (r_inv_t * u.normalized());
    return ParamPoint::unpack(a);
  };
  Rng rng(stream_seed(cfg.seed, 0xC0FFEEULL));
  std::vector<Vec> base_dirs;
  for (Eigen::Index c = 0; c < d; ++c) base_dirs.push_back(es.eigenvectors().col(c));
  for (int s = 0; s < multistart; ++s) {
    Vec u(d);
    for (Eigen::Index c = 0; c < d; ++c) u(c) = rng.normal();
    base_dirs.push_back(u);
  }

  std::vector<std::pair<double, double>> raw;
  Vec warm;
  for (double t : t_grid) {
    if (!(t > 0.0)) {
      raw.push_back({t, 0.0});
      continue;
    }
    auto f = [&](const Vec& u) {
      if (!(u.norm() > 1e-12)) return kInf;
      return p.q_bar(shell_point(u, t)) - q0;
    };
    double best = kInf;
    Vec best_u;
    std::vector<Vec> dirs = base_dirs;
    if (warm.size()) dirs.insert(dirs.begin(), warm);
    for (const Vec& u0 : dirs) {
      for (double sign : {1.0, -1.0}) {
        const Vec start = sign * u0.normalized();
        auto nm = nelder_mead(f, start, Vec::Constant(d, 0.3), 600, 1e-14, 1e-10);
        nm = nelder_mead(f, nm.x.normalized(), Vec::Constant(d, 0.02), 400, 1e-15, 1e-11);
        if (nm.f < best) best = nm.f, best_u = nm.x.normalized();
      }
    }
    if (!std::isfinite(best)) {
      rep.missing_t.push_back(t);
      continue;
    }
    warm = best_u;
    raw.push_back({t, best});
    const Mat ha = detail::orthonormal_hessian(p, shell_point(best_u, t), r_inv_t);
    Eigen::SelfAdjointEigenSolver<Mat> ea(0.5 * ha, Eigen::EigenvaluesOnly);
    rep.arc_min_eig = std::min(rep.arc_min_eig, ea.eigenvalues().minCoeff());
  }
  // Exterior infimum: every shell point at radius t' >= t is feasible for t.
  std::vector<std::size_t> order(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return raw[a].first < raw[b].first; });
  std::vector<std::pair<double, double>> sorted;
  for (auto i : order) sorted.push_back(raw[i]);
  for (auto& s : sorted) rep.shell_minima.push_back(s.second);
  double run = kInf;
  for (std::size_t i = sorted.size(); i-- > 0;) {
    if (sorted[i].first > 0.0) {
      run = std::min(run, sorted[i].second);
      sorted[i].second = run;
    } else {
      sorted[i].second = 0.0;
    }
  }
  rep.varpi_samples = sorted;
  return rep;
}

}  // namespace psgel
