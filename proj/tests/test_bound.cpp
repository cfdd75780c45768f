#include <gtest/gtest.h>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>

#include "psgel/bound.hpp"
#include "psgel/dgp.hpp"

using namespace psgel;

namespace {

using gk = boost::math::quadrature::gauss_kronrod<double, 61>;

const OperatorGrid& default_op() {
  static const Oracle o(DgpSpec{});
  static const OperatorGrid op = build_operator(o, 96, 96);
  return op;
}

Vec random_vec(Rng& r, Eigen::Index n) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = r.normal();
  return v;
}

FitConfig fit_with(int k, double gamma = 1e-5) {
  FitConfig c;
  c.sieve.k_order = k;
  c.sieve.j_order = 5;
  c.sieve.gamma_k = gamma;
  return c;
}

}  // namespace

TEST(Operator, MarginalsIntegrateToOne) {
  const auto& op = default_op();
  EXPECT_NEAR(op.pw_weights.sum(), 1.0, 1e-6);
  EXPECT_NEAR(op.px_weights.sum(), 1.0, 1e-6);
  EXPECT_GE(op.pw_weights.minCoeff(), 0.0);
  EXPECT_GE(op.px_weights.minCoeff(), 0.0);
  EXPECT_GE(op.t_matrix.minCoeff(), 0.0);
}

TEST(Operator, AdjointIdentity) {
  const auto& op = default_op();
  Rng r(1);
  for (int it = 0; it < 100; ++it) {
    const Vec g = random_vec(r, static_cast<Eigen::Index>(op.nw()));
    const Vec f = random_vec(r, static_cast<Eigen::Index>(op.nx()));
    const double lhs = op.inner_x(op.apply(g), f);
    const double rhs = op.inner_w(g, op.apply_adjoint(f));
    const double scale = std::sqrt(op.inner_w(g, g) * op.inner_x(f, f));
    EXPECT_LE(std::abs(lhs - rhs), 1e-6 * scale);
  }
}

TEST(Operator, ConstantFunctionMatchesScalarQuadrature) {
  const Oracle o(DgpSpec{});
  const auto& op = default_op();
  const Vec tg = op.apply(Vec::Ones(static_cast<Eigen::Index>(op.nw())));
  for (std::size_t i : {30u, 40u, 48u, 56u, 66u}) {
    const double x = op.x_nodes[i];
    const double ref = gk::integrate(
        [&](double w) { return o.cond_pdf_y(o.h0(w), w, x) * o.cond_pdf_w_given_x(w, x); }, 0.0, 1.0, 15, 1e-12);
    EXPECT_NEAR(tg(static_cast<Eigen::Index>(i)), ref, 1e-6) << x;
  }
}

TEST(Operator, GridRefinementIsConverged) {
  const Oracle o(DgpSpec{});
  const double n64 = operator_svd(build_operator(o, 64, 64)).sigma(0);
  const double n128 = operator_svd(build_operator(o, 128, 128)).sigma(0);
  EXPECT_LE(std::abs(n64 - n128), 1e-4 * n128);
}

TEST(Operator, RequiresLatentMixing) {
  DgpSpec s;
  s.b = 0.0;
  EXPECT_THROW(build_operator(Oracle(s)), ConfigError);
  EXPECT_THROW(build_operator(Oracle(DgpSpec{}), 1, 10), ConfigError);
}

TEST(Bound, GammaMatchesIndependentQuadrature) {
  // E[rho1 rho2 | X = x] by 1-D integration over w, against Gamma(x) tau (1 - tau).
  const Oracle o(DgpSpec{});
  const auto& op = default_op();
  const auto mu = WeightFn::quartic();
  const double t0 = oracle_theta0(o.spec(), mu).value;
  const Vec gam = gamma_on_grid(op, o, mu, t0);
  const double tau = o.tau();
  Vec m(static_cast<Eigen::Index>(op.nx()));
  for (std::size_t i = 0; i < op.nx(); ++i) {
    const double x = op.x_nodes[i];
    m(static_cast<Eigen::Index>(i)) = gk::integrate(
        [&](double w) {
          const double r1 = t0 - mu.mu(w) * o.dh0(w);
          return r1 * (o.cond_cdf_y(o.h0(w), w, x) - tau) * o.cond_pdf_w_given_x(w, x);
        },
        0.0, 1.0, 15, 1e-12);
  }
  // eps orthogonality: E[eps rho2 f(X)] = E[f(X) (m(X) - Gamma(X) tau (1 - tau))] = 0.
  Rng r(2);
  for (int it = 0; it < 20; ++it) {
    const Vec f = random_vec(r, m.size());
    const Vec resid = m - tau * (1 - tau) * gam;
    EXPECT_LE(std::abs(op.inner_x(f, resid)), 1e-6);
  }
}

TEST(Bound, ProjectionIsIdempotent) {
  const auto svd = operator_svd(default_op());
  const int k = truncation_count(svd.sigma, 1e-8);
  const Mat p = range_projection(svd, k);
  EXPECT_LE((p * p - p).cwiseAbs().maxCoeff(), 1e-8);
  for (Eigen::Index i = 1; i < svd.sigma.size(); ++i) EXPECT_LE(svd.sigma(i), svd.sigma(i - 1));
}

TEST(Bound, AdditiveAndMonotoneInTruncation) {
  const Oracle o(DgpSpec{});
  const auto& op = default_op();
  const auto mu = WeightFn::quartic();
  const auto svd = operator_svd(op);
  const auto base = v0_bound(op, o, mu, 1e-8, -1, &svd);
  EXPECT_EQ(base.v0, base.eps_norm_sq + base.correction_sq);
  EXPECT_GT(base.eps_norm_sq, 0.0);
  EXPECT_GT(base.truncation_index, 0);
  for (std::size_t i = 1; i < base.picard_partial_sums.size(); ++i)
    EXPECT_GE(base.picard_partial_sums[i], base.picard_partial_sums[i - 1]);
  double prev = -1.0;
  for (int keep = 0; keep <= base.truncation_index; ++keep) {
    const auto r = v0_bound(op, o, mu, 1e-8, keep, &svd);
    EXPECT_EQ(r.v0, r.eps_norm_sq + r.correction_sq);
    EXPECT_GE(r.v0, prev);
    prev = r.v0;
  }
  EXPECT_EQ(prev, base.v0);
}

TEST(Bound, TruncationCounting) {
  Vec s(4);
  s << 1.0, 1e-2, 1e-4, 1e-6;
  EXPECT_EQ(truncation_count(s, 1e-8), 2);  // (1e-4)^2 is not strictly above 1e-8
  EXPECT_EQ(truncation_count(s, 1e-9), 3);
  EXPECT_EQ(truncation_count(s, 1e-3), 1);
  EXPECT_EQ(truncation_count(s, 0.0), 4);
}

TEST(Criterion, ZeroAtTruthWhenSieveContainsIt) {
  const Oracle o(DgpSpec{});
  const auto c = fit_with(3);
  const auto p = make_population_problem(o, c);
  EXPECT_LE(q_j_criterion(ParamPoint{p.theta0, project_h0(o, p.bases.h)}, p), 1e-12);
}

TEST(Criterion, NonnegativeAndSandwiched) {
  const Oracle o(DgpSpec{});
  const auto c = fit_with(4);
  const auto p = make_population_problem(o, c);
  const double cst = sandwich_constant(p);
  Rng r(3);
  for (int it = 0; it < 1000; ++it) {
    ParamPoint a{r.normal(), random_vec(r, 4) * 0.5};
    const double q = q_j_criterion(a, p);
    EXPECT_GE(q, 0.0);
    if (it < 100) {
      const double g2 = population_g(a, p.grid).squaredNorm();
      EXPECT_GE(q, g2 / cst * (1 - 1e-10));
      EXPECT_LE(q, g2 * cst * (1 + 1e-10));
    }
  }
}

TEST(Curvature, ProfileShape) {
  const Oracle o(DgpSpec{});
  const auto c = fit_with(3);
  const auto p = make_population_problem(o, c);
  const auto pt = pseudo_true(p, c);
  const std::vector<double> tg{0.0, 0.05, 0.1, 0.2, 0.3, 0.5};
  const auto rep = varpi_profile(p, c, pt.alpha, tg);
  ASSERT_EQ(rep.varpi_samples.size(), tg.size());
  EXPECT_TRUE(rep.missing_t.empty());
  EXPECT_EQ(rep.varpi_samples[0].second, 0.0);
  for (std::size_t i = 1; i < rep.varpi_samples.size(); ++i) {
    EXPECT_GT(rep.varpi_samples[i].second, 1e-8) << rep.varpi_samples[i].first;
    EXPECT_GE(rep.varpi_samples[i].second, rep.varpi_samples[i - 1].second - 1e-8);
  }
  // Raw shell minima are themselves upper bounds on the profile.
  for (std::size_t i = 0; i < rep.shell_minima.size(); ++i)
    EXPECT_LE(rep.varpi_samples[i].second, rep.shell_minima[i] + 1e-15);
  EXPECT_GT(rep.i_l_min_eig, 0.0);
  EXPECT_TRUE(rep.heuristic);
  // Quadratic model: varpi(t) is at least e_min(I_L) t^2 to leading order for small t.
  EXPECT_GE(rep.varpi_samples[1].second, 0.5 * rep.i_l_min_eig * 0.05 * 0.05);
}
