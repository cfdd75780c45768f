#pragma once

// Moment vector g_J(z, alpha) = (rho1, rho2 q^J(x)')', its sample averages and
// population counterparts under the oracle design.

#include <cmath>
#include <span>
#include <vector>

#include "psgel/dgp.hpp"
#include "psgel/numeric.hpp"
#include "psgel/sieve.hpp"

namespace psgel {

struct ParamPoint {
  double theta = 0.0;
  Vec pi;

  int k() const { return static_cast<int>(pi.size()); }
  // Packed (theta, pi) coordinates.
  Vec packed() const {
    Vec a(pi.size() + 1);
    a(0) = theta;
    a.tail(pi.size()) = pi;
    return a;
  }
  static ParamPoint unpack(const Vec& a) { return {a(0), a.tail(a.size() - 1)}; }
  bool operator==(const ParamPoint& o) const { return theta == o.theta && pi == o.pi; }
};

// Everything needed to evaluate g_J besides the data.
struct Bases {
  HBasis h;
  QBasis q;
  WeightFn mu = WeightFn::quartic();

  int j() const { return q.size(); }
  int k() const { return h.size(); }
  int m() const { return q.size() + 1; }
};

// Single-observation moment vector, exact indicator.
inline Vec g_eval(double y, double w, double x, const ParamPoint& a, const Bases& b, double tau) {
  const int j = b.j();
  const int k = b.k();
  Vec phi(k), dphi(k);
  b.h.basis.eval(w, phi.data(), dphi.data());
  Vec g(j + 1);
  g(0) = a.theta - b.mu.mu(w) * dphi.dot(a.pi);
  const double rho2 = (y <= phi.dot(a.pi) ? 1.0 : 0.0) - tau;
  g.tail(j) = rho2 * b.q.eval(x);
  return g;
}

// Gaussian-CDF smoothed indicator.
inline Vec g_eval_smoothed(double y, double w, double x, const ParamPoint& a, const Bases& b, double tau,
                           double bandwidth) {
  if (!(bandwidth > 0.0)) throw ConfigError("g_eval_smoothed: bandwidth must be positive");
  const int j = b.j();
  const int k = b.k();
  Vec phi(k), dphi(k);
  b.h.basis.eval(w, phi.data(), dphi.data());
  Vec g(j + 1);
  g(0) = a.theta - b.mu.mu(w) * dphi.dot(a.pi);
  const double rho2 = normal_cdf((phi.dot(a.pi) - y) / bandwidth) - tau;
  g.tail(j) = rho2 * b.q.eval(x);
  return g;
}

// d rho2_smoothed / d pi (length K).
inline Vec smoothed_rho2_grad(double y, double w, const ParamPoint& a, const Bases& b, double bandwidth) {
  const Vec phi = b.h.basis.values(w);
  return normal_pdf((phi.dot(a.pi) - y) / bandwidth) / bandwidth * phi;
}

// Quantities of a dataset that do not depend on alpha, laid out for fast
// repeated evaluation of the n x (J+1) moment matrix.
struct SampleDesign {
  Vec y;
  Mat phi;    // n x K
  Mat dphi;   // n x K, premultiplied by mu(w_i)
  Mat q;      // n x J whitened
  double tau = 0.5;

  std::size_t n() const { return static_cast<std::size_t>(y.size()); }
  int j() const { return static_cast<int>(q.cols()); }
  int k() const { return static_cast<int>(phi.cols()); }

  // Rows are g_J(Z_i, alpha)'. bandwidth <= 0 selects the exact indicator.
  Mat moments(const ParamPoint& a, double bandwidth = 0.0) const {
    Mat g(y.size(), q.cols() + 1);
    fill(a, bandwidth, g);
    return g;
  }

  void fill(const ParamPoint& a, double bandwidth, Mat& g) const {
    const Eigen::Index n = y.size();
    g.resize(n, q.cols() + 1);
    g.col(0).setConstant(a.theta);
    g.col(0).noalias() -= dphi * a.pi;
    const Vec h = phi * a.pi;
    Vec rho2(n);
    if (bandwidth > 0.0) {
      for (Eigen::Index i = 0; i < n; ++i) rho2(i) = normal_cdf((h(i) - y(i)) / bandwidth) - tau;
    } else {
      for (Eigen::Index i = 0; i < n; ++i) rho2(i) = (y(i) <= h(i) ? 1.0 : 0.0) - tau;
    }
    g.rightCols(q.cols()) = q.array().colwise() * rho2.array();
  }
};

inline SampleDesign make_design(const Dataset& data, const Bases& b, double tau) {
  const auto n = static_cast<Eigen::Index>(data.n());
  SampleDesign d;
  d.tau = tau;
  d.y = Eigen::Map<const Vec>(data.y.data(), n);
  d.phi.resize(n, b.k());
  d.dphi.resize(n, b.k());
  Vec v(b.k()), dv(b.k());
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = data.w[static_cast<std::size_t>(i)];
    b.h.basis.eval(w, v.data(), dv.data());
    d.phi.row(i) = v.transpose();
    d.dphi.row(i) = b.mu.mu(w) * dv.transpose();
  }
  d.q = q_matrix(b.q, data.x);
  return d;
}

// Column means by pairwise summation (order-fixed, thread-count independent).
inline Vec column_means(const Mat& g) {
  Vec out(g.cols());
  std::vector<double> col(static_cast<std::size_t>(g.rows()));
  for (Eigen::Index c = 0; c < g.cols(); ++c) {
    for (Eigen::Index r = 0; r < g.rows(); ++r) col[static_cast<std::size_t>(r)] = g(r, c);
    out(c) = pairwise_sum(col) / static_cast<double>(g.rows());
  }
  return out;
}

inline Mat second_moment(const Mat& g) {
  Mat h = (g.transpose() * g) / static_cast<double>(g.rows());
  return 0.5 * (h + h.transpose());
}

inline Vec g_bar(const Dataset& data, const ParamPoint& a, const Bases& b, double tau) {
  return column_means(make_design(data, b, tau).moments(a));
}

inline Mat h_mat(const Dataset& data, const ParamPoint& a, const Bases& b, double tau) {
  return second_moment(make_design(data, b, tau).moments(a));
}

// ---------------------------------------------------------------------------
// Population moments. Expectations run over the latent coordinates
// t = Phi^{-1}(X) ~ N(0,1) and V ~ N(0,1) with a tensor Gauss-Hermite rule;
// given (X, V) the outcome is Gaussian so the indicator integrates to a CDF.

struct PopulationGrid {
  Vec wt;     // quadrature weights, sum 1
  Vec x, w, v;
  Mat phi;    // N x K
  Mat dphi;   // N x K, times mu(w)
  Mat q;      // N x J
  const Oracle* oracle = nullptr;
  std::size_t nodes_per_dim = 0;

  Eigen::Index size() const { return wt.size(); }
};

inline PopulationGrid make_population_grid(const Oracle& oracle, const Bases& b, std::size_t nodes = 96) {
  const auto gh = gauss_hermite_normal(nodes);
  const double a = oracle.spec().a;
  const double bb = oracle.spec().b;
  // With b = 0 the V dimension still matters through Y but not through W.
  const std::size_t total = nodes * nodes;
  PopulationGrid g;
  g.oracle = &oracle;
  g.nodes_per_dim = nodes;
  g.wt.resize(static_cast<Eigen::Index>(total));
  g.x.resize(g.wt.size());
  g.w.resize(g.wt.size());
  g.v.resize(g.wt.size());
  std::size_t idx = 0;
  for (std::size_t it = 0; it < nodes; ++it) {
    for (std::size_t iv = 0; iv < nodes; ++iv, ++idx) {
      const double t = gh.nodes[it];
      const double v = gh.nodes[iv];
      const auto e = static_cast<Eigen::Index>(idx);
      g.wt(e) = gh.weights[it] * gh.weights[iv];
      g.x(e) = normal_cdf(t);
      g.w(e) = normal_cdf(a * t + bb * v);
      g.v(e) = v;
    }
  }
  const Eigen::Index n = g.size();
  g.phi.resize(n, b.k());
  g.dphi.resize(n, b.k());
  g.q.resize(n, b.j());
  Vec pv(b.k()), dv(b.k());
  for (Eigen::Index i = 0; i < n; ++i) {
    b.h.basis.eval(g.w(i), pv.data(), dv.data());
    g.phi.row(i) = pv.transpose();
    g.dphi.row(i) = b.mu.mu(g.w(i)) * dv.transpose();
    g.q.row(i) = b.q.eval(g.x(i)).transpose();
  }
  return g;
}

namespace detail {

// Conditional P(Y <= h(W) | X, V) and density at h(W) on every node.
inline void conditional_cdf(const PopulationGrid& g, const Vec& h, Vec& cdf, Vec* pdf = nullptr) {
  cdf.resize(g.size());
  if (pdf) pdf->resize(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    cdf(i) = g.oracle->cdf_y_given_xv(h(i), g.w(i), g.v(i));
    if (pdf) (*pdf)(i) = g.oracle->pdf_y_given_xv(h(i), g.w(i), g.v(i));
  }
}

}  // namespace detail

// E_P[g_J(Z, alpha)].
inline Vec population_g(const ParamPoint& a, const PopulationGrid& g) {
  const double tau = g.oracle->tau();
  const Vec h = g.phi * a.pi;
  Vec cdf;
  detail::conditional_cdf(g, h, cdf);
  Vec out(g.q.cols() + 1);
  const Vec rho1 = (a.theta - (g.dphi * a.pi).array()).matrix();
  out(0) = g.wt.dot(rho1);
  const Vec r2 = (g.wt.array() * (cdf.array() - tau)).matrix();
  out.tail(g.q.cols()) = g.q.transpose() * r2;
  return out;
}

// Jacobian of population_g in the packed (theta, pi) coordinates, (J+1) x (K+1).
// The rho1 row is (1, -E[mu phi']) and the rho2 block is E[p_{Y|XV}(h(W)) q phi'].
inline Mat population_jacobian(const ParamPoint& a, const PopulationGrid& g) {
  const Vec h = g.phi * a.pi;
  Vec cdf, pdf;
  detail::conditional_cdf(g, h, cdf, &pdf);
  const int j = static_cast<int>(g.q.cols());
  const int k = static_cast<int>(g.phi.cols());
  Mat jac = Mat::Zero(j + 1, k + 1);
  jac(0, 0) = 1.0;
  jac.block(0, 1, 1, k) = -(g.wt.transpose() * g.dphi);
  const Vec wp = (g.wt.array() * pdf.array()).matrix();
  jac.block(1, 1, j, k) = g.q.transpose() * wp.asDiagonal() * g.phi;
  return jac;
}

// H_J(alpha, P) = E_P[g g'].
inline Mat population_h(const ParamPoint& a, const PopulationGrid& g) {
  const double tau = g.oracle->tau();
  const Vec h = g.phi * a.pi;
  Vec cdf;
  detail::conditional_cdf(g, h, cdf);
  const int j = static_cast<int>(g.q.cols());
  const Vec rho1 = (a.theta - (g.dphi * a.pi).array()).matrix();
  const Vec er2 = (cdf.array() - tau).matrix();
  // E[rho2^2 | X, V] = F (1 - tau)^2 + (1 - F) tau^2.
  const Vec er22 = (cdf.array() * (1.0 - 2.0 * tau) + tau * tau).matrix();
  Mat out(j + 1, j + 1);
  out(0, 0) = g.wt.dot(rho1.cwiseProduct(rho1));
  const Vec c = (g.wt.array() * rho1.array() * er2.array()).matrix();
  out.block(1, 0, j, 1) = g.q.transpose() * c;
  out.block(0, 1, 1, j) = out.block(1, 0, j, 1).transpose();
  out.block(1, 1, j, j) = g.q.transpose() * (g.wt.array() * er22.array()).matrix().asDiagonal() * g.q;
  return 0.5 * (out + out.transpose());
}

// Coefficients of the L^2(Leb) projection of h0 onto the h-basis.
inline Vec project_h0(const Oracle& oracle, const HBasis& hb) {
  const int k = hb.size();
  Vec v(k);
  const Mat rhs = detail::integrate_matrix(hb.basis.breakpoints(), k, 1, [&](double w, double wt, Mat& m) {
    hb.basis.eval(w, v.data());
    m.col(0).noalias() += wt * oracle.h0(w) * v;
  });
  return hb.gram0.ldlt().solve(rhs.col(0));
}

}  // namespace psgel
