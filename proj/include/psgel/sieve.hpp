#pragma once

// Sieve bases on [0,1]: the h-basis phi^K (with analytic first and second
// derivatives) and the instrument basis q^J (empirically whitened).

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "psgel/dgp.hpp"
#include "psgel/error.hpp"
#include "psgel/numeric.hpp"

namespace psgel {

enum class BasisKind { legendre, bspline, cosine };
enum class PenaltyKind { sobolev1, sobolev12 };

inline std::string to_string(BasisKind k) {
  switch (k) {
    case BasisKind::legendre: return "legendre";
    case BasisKind::bspline: return "bspline";
    case BasisKind::cosine: return "cosine";
  }
  return "?";
}

inline BasisKind parse_basis_kind(const std::string& s) {
  if (s == "legendre") return BasisKind::legendre;
  if (s == "bspline") return BasisKind::bspline;
  if (s == "cosine") return BasisKind::cosine;
  throw ConfigError("unknown basis kind '" + s + "'");
}

inline std::string to_string(PenaltyKind k) { return k == PenaltyKind::sobolev1 ? "sobolev1" : "sobolev12"; }

inline PenaltyKind parse_penalty_kind(const std::string& s) {
  if (s == "sobolev1") return PenaltyKind::sobolev1;
  if (s == "sobolev12") return PenaltyKind::sobolev12;
  throw ConfigError("unknown penalty kind '" + s + "'");
}

struct BasisSpec {
  BasisKind kind = BasisKind::legendre;
  int degree = 3;                      // bspline only
  std::vector<double> interior_knots;  // bspline only; empty = uniform
};

struct SieveSpec {
  int j_order = 5;
  int k_order = 3;
  BasisSpec h_basis{};
  BasisSpec q_basis{};
  double gamma_k = 1e-5;
  PenaltyKind penalty = PenaltyKind::sobolev12;

  void validate() const {
    if (j_order < 1) throw ConfigError("sieve: J must be >= 1");
    if (k_order < 1) throw ConfigError("sieve: K must be >= 1");
    if (!(gamma_k >= 0.0) || !std::isfinite(gamma_k)) throw ConfigError("sieve: gamma_K must be >= 0");
  }
};

// A family of `size` functions on [0,1] with analytic derivatives.
class Basis1D {
 public:
  Basis1D() = default;

  Basis1D(const BasisSpec& spec, int size) : kind_(spec.kind), size_(size), degree_(spec.degree) {
    if (size < 1) throw ConfigError("basis size must be >= 1");
    if (kind_ == BasisKind::bspline) build_knots(spec);
  }

  int size() const { return size_; }
  BasisKind kind() const { return kind_; }
  const std::vector<double>& knots() const { return knots_; }

  // Distinct breakpoints of the piecewise structure (just {0,1} for global bases).
  std::vector<double> breakpoints() const {
    if (kind_ != BasisKind::bspline) return {0.0, 1.0};
    std::vector<double> bp(knots_.begin() + degree_, knots_.end() - degree_);
    bp.erase(std::unique(bp.begin(), bp.end()), bp.end());
    return bp;
  }

  // Values and optional derivatives of all functions at x.
  void eval(double x, double* v, double* d1 = nullptr, double* d2 = nullptr) const {
    switch (kind_) {
      case BasisKind::legendre: eval_legendre(x, v, d1, d2); break;
      case BasisKind::cosine: eval_cosine(x, v, d1, d2); break;
      case BasisKind::bspline: eval_bspline(x, v, d1, d2); break;
    }
  }

  Vec values(double x) const {
    Vec v(size_);
    eval(x, v.data());
    return v;
  }
  Vec derivs(double x) const {
    Vec v(size_), d(size_);
    eval(x, v.data(), d.data());
    return d;
  }
  Vec derivs2(double x) const {
    Vec v(size_), d(size_), dd(size_);
    eval(x, v.data(), d.data(), dd.data());
    return dd;
  }

 private:
  void build_knots(const BasisSpec& spec) {
    if (degree_ < 0) throw ConfigError("bspline degree must be >= 0");
    const int interior = size_ - degree_ - 1;
    if (interior < 0) throw ConfigError("bspline: K must be >= degree + 1");
    std::vector<double> inner = spec.interior_knots;
    if (inner.empty()) {
      for (int i = 1; i <= interior; ++i) inner.push_back(static_cast<double>(i) / (interior + 1));
    } else {
      if (static_cast<int>(inner.size()) != interior)
        throw ConfigError("bspline: interior knot count must equal K - degree - 1");
      for (std::size_t i = 0; i < inner.size(); ++i) {
        if (!(inner[i] > 0.0 && inner[i] < 1.0)) throw ConfigError("bspline: interior knots must lie in (0,1)");
        if (i > 0 && !(inner[i] > inner[i - 1])) throw ConfigError("bspline: interior knots must be increasing");
      }
    }
    knots_.assign(static_cast<std::size_t>(degree_ + 1), 0.0);
    knots_.insert(knots_.end(), inner.begin(), inner.end());
    knots_.insert(knots_.end(), static_cast<std::size_t>(degree_ + 1), 1.0);
  }

  void eval_legendre(double x, double* v, double* d1, double* d2) const {
    const double t = 2.0 * x - 1.0;
    double p0 = 1.0, p1 = t, dp0 = 0.0, dp1 = 1.0, ddp0 = 0.0, ddp1 = 0.0;
    for (int k = 0; k < size_; ++k) {
      double p, dp, ddp;
      if (k == 0) {
        p = 1.0, dp = 0.0, ddp = 0.0;
      } else if (k == 1) {
        p = t, dp = 1.0, ddp = 0.0;
      } else {
        p = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
        dp = dp0 + (2.0 * k - 1.0) * p1;
        ddp = ddp0 + (2.0 * k - 1.0) * dp1;
        p0 = p1, p1 = p;
        dp0 = dp1, dp1 = dp;
        ddp0 = ddp1, ddp1 = ddp;
      }
      const double c = std::sqrt(2.0 * k + 1.0);
      v[k] = c * p;
      if (d1) d1[k] = 2.0 * c * dp;
      if (d2) d2[k] = 4.0 * c * ddp;
    }
  }

  void eval_cosine(double x, double* v, double* d1, double* d2) const {
    for (int k = 0; k < size_; ++k) {
      const double f = k * std::numbers::pi;
      v[k] = std::cos(f * x);
      if (d1) d1[k] = -f * std::sin(f * x);
      if (d2) d2[k] = -f * f * std::cos(f * x);
    }
  }

  // Piegl & Tiller, "The NURBS Book", algorithms A2.1 and A2.3.
  void eval_bspline(double x, double* v, double* d1, double* d2) const {
    const int p = degree_;
    const int nb = size_;
    x = std::clamp(x, 0.0, 1.0);
    int span;
    if (x >= knots_[static_cast<std::size_t>(nb)]) {
      span = nb - 1;
    } else {
      span = static_cast<int>(std::upper_bound(knots_.begin(), knots_.end(), x) - knots_.begin()) - 1;
      span = std::clamp(span, p, nb - 1);
    }
    const int nd = std::min(2, p);
    std::vector<double> ndu(static_cast<std::size_t>((p + 1) * (p + 1)));
    auto NDU = [&](int r, int c) -> double& { return ndu[static_cast<std::size_t>(r * (p + 1) + c)]; };
    std::vector<double> left(static_cast<std::size_t>(p + 1)), right(static_cast<std::size_t>(p + 1));
    NDU(0, 0) = 1.0;
    for (int j = 1; j <= p; ++j) {
      left[j] = x - knots_[static_cast<std::size_t>(span + 1 - j)];
      right[j] = knots_[static_cast<std::size_t>(span + j)] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        NDU(j, r) = right[r + 1] + left[j - r];
        const double temp = NDU(r, j - 1) / NDU(j, r);
        NDU(r, j) = saved + right[r + 1] * temp;
        saved = left[j - r] * temp;
      }
      NDU(j, j) = saved;
    }
    std::array<std::vector<double>, 3> ders;
    for (auto& d : ders) d.assign(static_cast<std::size_t>(p + 1), 0.0);
    for (int j = 0; j <= p; ++j) ders[0][j] = NDU(j, p);
    std::array<std::vector<double>, 2> a;
    for (auto& row : a) row.assign(static_cast<std::size_t>(p + 1), 0.0);
    for (int r = 0; r <= p; ++r) {
      int s1 = 0, s2 = 1;
      a[0][0] = 1.0;
      for (int k = 1; k <= nd; ++k) {
        double d = 0.0;
        const int rk = r - k, pk = p - k;
        if (r >= k) {
          a[s2][0] = a[s1][0] / NDU(pk + 1, rk);
          d = a[s2][0] * NDU(rk, pk);
        }
        const int j1 = (rk >= -1) ? 1 : -rk;
        const int j2 = (r - 1 <= pk) ? k - 1 : p - r;
        for (int j = j1; j <= j2; ++j) {
          a[s2][j] = (a[s1][j] - a[s1][j - 1]) / NDU(pk + 1, rk + j);
          d += a[s2][j] * NDU(rk + j, pk);
        }
        if (r <= pk) {
          a[s2][k] = -a[s1][k - 1] / NDU(pk + 1, r);
          d += a[s2][k] * NDU(r, pk);
        }
        ders[k][r] = d;
        std::swap(s1, s2);
      }
    }
    double fac = p;
    for (int k = 1; k <= nd; ++k) {
      for (int j = 0; j <= p; ++j) ders[k][j] *= fac;
      fac *= (p - k);
    }
    std::fill(v, v + nb, 0.0);
    if (d1) std::fill(d1, d1 + nb, 0.0);
    if (d2) std::fill(d2, d2 + nb, 0.0);
    for (int j = 0; j <= p; ++j) {
      const int idx = span - p + j;
      v[idx] = ders[0][j];
      if (d1) d1[idx] = ders[1][j];
      if (d2) d2[idx] = ders[2][j];
    }
  }

  BasisKind kind_ = BasisKind::legendre;
  int size_ = 0;
  int degree_ = 3;
  std::vector<double> knots_;
};

namespace detail {

// Integrates f over [0,1] piecewise between breakpoints with Gauss-Legendre,
// doubling the node count until entries change by less than `tol`.
template <class F>
Mat integrate_matrix(const std::vector<double>& bp, int rows, int cols, F&& accumulate, double tol = 1e-10) {
  auto run = [&](std::size_t nodes) {
    Mat m = Mat::Zero(rows, cols);
    for (std::size_t s = 0; s + 1 < bp.size(); ++s) {
      const auto rule = gauss_legendre(nodes, bp[s], bp[s + 1]);
      for (std::size_t q = 0; q < rule.size(); ++q) accumulate(rule.nodes[q], rule.weights[q], m);
    }
    return m;
  };
  std::size_t nodes = static_cast<std::size_t>(std::max(rows, cols)) + 8;
  Mat prev = run(nodes);
  for (int it = 0; it < 8; ++it) {
    nodes *= 2;
    Mat next = run(nodes);
    const double diff = (next - prev).cwiseAbs().maxCoeff();
    prev = std::move(next);
    if (diff < tol) return prev;
  }
  return prev;
}

}  // namespace detail

// h-basis with its Lebesgue Gram matrices.
struct HBasis {
  Basis1D basis;
  Mat gram0;    // int phi phi'
  Mat gram_d1;  // int phi' phi''
  Mat gram_d2;  // int phi'' phi'''

  int size() const { return basis.size(); }
  double eval(double w, int k) const { return basis.values(w)(k); }
  double deriv(double w, int k) const { return basis.derivs(w)(k); }
  double deriv2(double w, int k) const { return basis.derivs2(w)(k); }

  double h(const Vec& pi, double w) const { return basis.values(w).dot(pi); }
  double dh(const Vec& pi, double w) const { return basis.derivs(w).dot(pi); }
};

inline HBasis build_h_basis(const SieveSpec& spec) {
  spec.validate();
  HBasis hb;
  hb.basis = Basis1D(spec.h_basis, spec.k_order);
  const int k = spec.k_order;
  std::vector<double> v(static_cast<std::size_t>(k)), d1(v.size()), d2(v.size());
  const auto bp = hb.basis.breakpoints();
  auto gram_of = [&](int which) {
    return detail::integrate_matrix(bp, k, k, [&](double x, double wt, Mat& m) {
      hb.basis.eval(x, v.data(), d1.data(), d2.data());
      const double* f = which == 0 ? v.data() : (which == 1 ? d1.data() : d2.data());
      Eigen::Map<const Vec> fv(f, k);
      m.noalias() += wt * fv * fv.transpose();
    });
  };
  hb.gram0 = gram_of(0);
  hb.gram_d1 = gram_of(1);
  hb.gram_d2 = gram_of(2);
  return hb;
}

// Pen(alpha) = pi' D pi.
inline Mat penalty_matrix(const SieveSpec& spec, const HBasis& hb) {
  return spec.penalty == PenaltyKind::sobolev1 ? Mat(hb.gram_d1) : Mat(hb.gram_d1 + hb.gram_d2);
}

// Analytic constant C with sup_w |mu(w) h'(w)| <= C (1 + Pen) under the
// sobolev12 penalty and max mu = 1: sup|h'| <= ||h'||_2 + ||h''||_2 <= sqrt(2 Pen).
inline constexpr double kSobolevSupConstant = 0.7071067811865476;

// Whitened instrument basis: q^J(x) = whitener * raw(x).
struct QBasis {
  Basis1D raw;
  Mat whitener;  // lower triangular, inverse Cholesky factor of the Gram

  int size() const { return raw.size(); }
  double raw_eval(double x, int j) const { return raw.values(x)(j); }
  Vec eval(double x) const { return whitener * raw.values(x); }
};

namespace detail {

inline QBasis whiten(Basis1D raw, const Mat& gram) {
  const int j = raw.size();
  Eigen::SelfAdjointEigenSolver<Mat> es(gram, Eigen::EigenvaluesOnly);
  const double emin = es.eigenvalues().minCoeff();
  if (!(emin > 1e-10 * gram.trace() / j)) throw DegenerateBasisError(emin, static_cast<std::size_t>(j));
  Eigen::LLT<Mat> llt(gram);
  if (llt.info() != Eigen::Success) throw DegenerateBasisError(emin, static_cast<std::size_t>(j));
  Mat lower = llt.matrixL();
  QBasis qb;
  qb.raw = std::move(raw);
  qb.whitener = lower.triangularView<Eigen::Lower>().solve(Mat::Identity(j, j));
  return qb;
}

}  // namespace detail

// Whitener fitted on the sample so (1/n) sum q q' = I.
inline QBasis build_q_basis(const SieveSpec& spec, const Dataset& data) {
  spec.validate();
  Basis1D raw(spec.q_basis, spec.j_order);
  const int j = spec.j_order;
  Mat gram = Mat::Zero(j, j);
  Vec r(j);
  for (std::size_t i = 0; i < data.n(); ++i) {
    raw.eval(data.x[i], r.data());
    gram.selfadjointView<Eigen::Lower>().rankUpdate(r);
  }
  gram = gram.selfadjointView<Eigen::Lower>();
  gram /= static_cast<double>(data.n());
  return detail::whiten(std::move(raw), gram);
}

// Whitener fitted on the population X ~ U(0,1).
inline QBasis build_q_basis_population(const SieveSpec& spec) {
  spec.validate();
  Basis1D raw(spec.q_basis, spec.j_order);
  const int j = spec.j_order;
  Vec r(j);
  const Mat gram = detail::integrate_matrix(raw.breakpoints(), j, j, [&](double x, double wt, Mat& m) {
    raw.eval(x, r.data());
    m.noalias() += wt * r * r.transpose();
  });
  return detail::whiten(std::move(raw), gram);
}

// Whitened instrument values for every observation (n x J).
inline Mat q_matrix(const QBasis& qb, std::span<const double> xs) {
  const int j = qb.size();
  Mat raw(static_cast<Eigen::Index>(xs.size()), j);
  Vec r(j);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    qb.raw.eval(xs[i], r.data());
    raw.row(static_cast<Eigen::Index>(i)) = r.transpose();
  }
  return raw * qb.whitener.transpose();
}

}  // namespace psgel
