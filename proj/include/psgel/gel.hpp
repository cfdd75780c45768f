#pragma once

// GEL carriers s(v) and the inner concave maximization over lambda.

#include <cmath>
#include <string>
#include <vector>

#include "psgel/error.hpp"
#include "psgel/numeric.hpp"

namespace psgel {

enum class GelKind { EL, ET, CUE };

inline std::string to_string(GelKind k) {
  switch (k) {
    case GelKind::EL: return "EL";
    case GelKind::ET: return "ET";
    case GelKind::CUE: return "CUE";
  }
  return "?";
}

inline GelKind parse_gel_kind(const std::string& s) {
  if (s == "EL" || s == "el") return GelKind::EL;
  if (s == "ET" || s == "et") return GelKind::ET;
  if (s == "CUE" || s == "cue") return GelKind::CUE;
  throw ConfigError("unknown GEL family '" + s + "'");
}

struct GelFamily {
  GelKind kind = GelKind::EL;
  // Open domain (lower, upper).
  double lower = -kInf;
  double upper = kInf;

  bool in_domain(double v) const { return v > lower && v < upper; }

  double s(double v) const {
    switch (kind) {
      case GelKind::EL: return std::log1p(-v);
      case GelKind::ET: return -std::expm1(v);
      case GelKind::CUE: return -v - 0.5 * v * v;
    }
    return 0.0;
  }
  double s1(double v) const {
    switch (kind) {
      case GelKind::EL: return -1.0 / (1.0 - v);
      case GelKind::ET: return -std::exp(v);
      case GelKind::CUE: return -1.0 - v;
    }
    return 0.0;
  }
  double s2(double v) const {
    switch (kind) {
      case GelKind::EL: {
        const double r = 1.0 - v;
        return -1.0 / (r * r);
      }
      case GelKind::ET: return -std::exp(v);
      case GelKind::CUE: return -1.0;
    }
    return 0.0;
  }
};

inline GelFamily s_family(GelKind kind) {
  GelFamily f;
  f.kind = kind;
  if (kind == GelKind::EL) f.upper = 1.0;
  return f;
}

// (1/n) sum s(lambda' g_i) - s(0) with g_i the rows of `g`.
inline double s_hat(const Mat& g, const Vec& lambda, const GelFamily& fam) {
  const Vec v = g * lambda;
  std::vector<double> terms(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!fam.in_domain(v(i))) throw OutOfDomainError(static_cast<std::size_t>(i));
    terms[static_cast<std::size_t>(i)] = fam.s(v(i));
  }
  return pairwise_sum(terms) / static_cast<double>(v.size()) - fam.s(0.0);
}

struct InnerSolution {
  Vec lambda;
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool boundary_hit = false;  // unbounded (EL) or iteration limit
  bool converged = false;
  bool unbounded = false;
  double ridge = 0.0;
  double decrement = 0.0;
  std::vector<double> trace;  // objective after each iteration
};

struct InnerOptions {
  double tol = 1e-9;
  int max_iter = 100;
  double fraction_to_boundary = 0.01;
  // Also stop once the Newton decrement says the value is this close to the sup.
  double decrement_tol = 1e-20;
  // Values beyond this are treated as divergence to +inf (EL only).
  double divergence_value = 1e8;
};

namespace detail {

// Objective, gradient and Hessian of lambda -> mean s(g_i' lambda).
struct InnerEval {
  double value = 0.0;
  Vec grad;
  Mat hess;
};

inline bool inner_value(const Mat& g, const Vec& v, const GelFamily& fam, double& out) {
  const auto n = static_cast<double>(g.rows());
  switch (fam.kind) {
    case GelKind::EL:
      if (!(v.maxCoeff() < 1.0)) return false;
      out = (1.0 - v.array()).log().sum() / n;
      break;
    case GelKind::ET: out = (1.0 - v.array().exp()).sum() / n; break;
    case GelKind::CUE: out = (-v.array() - 0.5 * v.array().square()).sum() / n; break;
  }
  return std::isfinite(out);
}

inline InnerEval inner_derivs(const Mat& g, const Vec& v, const GelFamily& fam) {
  const Eigen::Index n = g.rows();
  Vec d1(n), d2(n);
  switch (fam.kind) {
    case GelKind::EL:
      d1 = -(1.0 - v.array()).inverse();
      d2 = -d1.array().square();
      break;
    case GelKind::ET:
      d1 = -v.array().exp();
      d2 = d1;
      break;
    case GelKind::CUE:
      d1 = -1.0 - v.array();
      d2 = Vec::Constant(n, -1.0);
      break;
  }
  InnerEval e;
  e.grad = g.transpose() * d1 / static_cast<double>(n);
  const Mat wg = g.array().colwise() * d2.array();
  e.hess = g.transpose() * wg / static_cast<double>(n);
  e.hess = 0.5 * (e.hess + e.hess.transpose());
  return e;
}

// Each column of g keeps a strict sign (or vanishes): zero lies outside the
// interior of the convex hull of the g_i, so the EL dual is unbounded.
inline bool origin_outside_hull_by_column(const Mat& g) {
  for (Eigen::Index c = 0; c < g.cols(); ++c) {
    const double lo = g.col(c).minCoeff();
    const double hi = g.col(c).maxCoeff();
    if (lo >= 0.0 || hi <= 0.0) {
      if (lo != 0.0 || hi != 0.0) return true;
    }
  }
  return false;
}

}  // namespace detail

// Maximizes the strictly concave lambda -> mean s(g_i' lambda) - s(0) by
// safeguarded Newton. Rows of `g` are the moment vectors.
inline InnerSolution inner_maximize(const Mat& g, const GelFamily& fam, const InnerOptions& opt = {}) {
  const Eigen::Index m = g.cols();
  InnerSolution sol;
  sol.lambda = Vec::Zero(m);
  const double s0 = fam.s(0.0);

  if (fam.kind == GelKind::EL && detail::origin_outside_hull_by_column(g)) {
    sol.value = kInf;
    sol.unbounded = true;
    sol.boundary_hit = true;
    return sol;
  }

  Vec v = Vec::Zero(g.rows());
  double f = s0;
  for (int it = 0; it < opt.max_iter; ++it) {
    auto e = detail::inner_derivs(g, v, fam);
    sol.gradient_norm = e.grad.norm();
    if (sol.gradient_norm <= opt.tol) {
      sol.converged = true;
      break;
    }
    // Newton direction: solve (-H) d = grad.
    Mat negh = -e.hess;
    Eigen::LDLT<Mat> ldlt(negh);
    Vec d;
    auto solve_ok = [&](const Eigen::LDLT<Mat>& f_) {
      if (f_.info() != Eigen::Success || !(f_.vectorD().minCoeff() > 0.0)) return false;
      d = f_.solve(e.grad);
      return d.allFinite();
    };
    if (!solve_ok(ldlt)) {
      const double ridge = 1e-10 * std::max(negh.trace(), 1e-300);
      sol.ridge = std::max(sol.ridge, ridge);
      Eigen::LDLT<Mat> reg(negh + ridge * Mat::Identity(m, m));
      if (!solve_ok(reg)) throw InnerSolverError("inner Newton system singular after ridge");
    }
    // Newton decrement: remaining ascent is about half of grad'd.
    sol.decrement = e.grad.dot(d);
    if (sol.decrement <= opt.decrement_tol) {
      sol.converged = true;
      break;
    }
    const Vec dv = g * d;
    // Fraction to boundary: the new gap to the domain edge stays above frac times the old one.
    double step = 1.0;
    if (std::isfinite(fam.upper)) {
      for (Eigen::Index i = 0; i < dv.size(); ++i) {
        if (dv(i) > 0.0) step = std::min(step, (1.0 - opt.fraction_to_boundary) * (fam.upper - v(i)) / dv(i));
      }
    }
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt) {
      const Vec vn = v + step * dv;
      double fn = 0.0;
      if (detail::inner_value(g, vn, fam, fn) && fn >= f) {
        sol.lambda += step * d;
        v = vn;
        moved = fn > f || step * d.norm() > 0.0;
        f = fn;
        break;
      }
      step *= 0.5;
    }
    sol.iterations = it + 1;
    sol.trace.push_back(f - s0);
    if (!moved) break;
    if (fam.kind == GelKind::EL && f - s0 > opt.divergence_value) {
      sol.value = kInf;
      sol.unbounded = true;
      sol.boundary_hit = true;
      return sol;
    }
  }
  if (!sol.converged) {
    const auto e = detail::inner_derivs(g, v, fam);
    sol.gradient_norm = e.grad.norm();
    Eigen::LDLT<Mat> ldlt(-e.hess);
    if (ldlt.info() == Eigen::Success) sol.decrement = e.grad.dot(ldlt.solve(e.grad));
    sol.converged = sol.gradient_norm <= opt.tol || (std::isfinite(sol.decrement) && sol.decrement <= opt.decrement_tol);
  }
  sol.value = f - s0;
  if (!sol.converged) {
    sol.boundary_hit = true;
    // EL ascent that cannot settle means lambda runs off to the domain edge.
    if (fam.kind == GelKind::EL) {
      sol.value = kInf;
      sol.unbounded = true;
      return sol;
    }
  }
  // lambda = 0 is feasible with value 0.
  if (sol.value < 0.0) {
    sol.value = 0.0;
    sol.lambda.setZero();
  }
  return sol;
}

// Closed-form CUE solution: lambda = -H^{-1} gbar, value = gbar' H^{-1} gbar / 2.
inline InnerSolution cue_closed_form(const Mat& g) {
  const Vec gbar = g.colwise().mean().transpose();
  const Mat h = (g.transpose() * g) / static_cast<double>(g.rows());
  InnerSolution sol;
  sol.lambda = -h.ldlt().solve(gbar);
  sol.value = -0.5 * gbar.dot(sol.lambda);
  sol.converged = true;
  return sol;
}

}  // namespace psgel
