#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "psgel/dgp.hpp"
#include "psgel/sieve.hpp"

using namespace psgel;

namespace {

SieveSpec spec_of(BasisKind kind, int k, int j = 3) {
  SieveSpec s;
  s.k_order = k;
  s.j_order = j;
  s.h_basis.kind = kind;
  s.q_basis.kind = kind;
  return s;
}

double max_identity_deviation(const Mat& m) { return (m - Mat::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff(); }

Mat whitened_gram(const QBasis& qb, const Dataset& d) {
  const Mat q = q_matrix(qb, d.x);
  return q.transpose() * q / static_cast<double>(d.n());
}

Dataset uniform_x(std::size_t n, std::uint64_t seed) {
  Dataset d;
  Rng r(seed);
  for (std::size_t i = 0; i < n; ++i) {
    d.x.push_back(r.uniform());
    d.y.push_back(0.0);
    d.w.push_back(0.5);
  }
  return d;
}

}  // namespace

TEST(HBasis, CosineConstantTermHasZeroDerivative) {
  const auto hb = build_h_basis(spec_of(BasisKind::cosine, 4));
  for (int i = 0; i <= 50; ++i) {
    const double w = i / 50.0;
    EXPECT_EQ(hb.deriv(w, 0), 0.0);
    EXPECT_EQ(hb.deriv2(w, 0), 0.0);
    EXPECT_EQ(hb.eval(w, 0), 1.0);
  }
}

TEST(HBasis, LegendreDerivativeGramMatchesAnalyticValues) {
  // phi_0 = 1, phi_1 = sqrt3 u, phi_2 = sqrt5 (3u^2 - 1)/2 with u = 2w - 1:
  // phi_1' = 2 sqrt3, phi_2' = 6 sqrt5 u, so the Gram is diag(0, 12, 60).
  const auto hb = build_h_basis(spec_of(BasisKind::legendre, 3));
  Mat expect = Mat::Zero(3, 3);
  expect(1, 1) = 12.0;
  expect(2, 2) = 60.0;
  EXPECT_LT((hb.gram_d1 - expect).cwiseAbs().maxCoeff(), 1e-10);
  // phi_2'' = 12 sqrt5 in w, squared 720.
  EXPECT_NEAR(hb.gram_d2(2, 2), 720.0, 1e-8);
  EXPECT_LT(max_identity_deviation(hb.gram0), 1e-12);
}

TEST(HBasis, BsplinePartitionOfUnity) {
  SieveSpec s = spec_of(BasisKind::bspline, 12);  // cubic, 8 uniform interior knots
  s.h_basis.degree = 3;
  const auto hb = build_h_basis(s);
  ASSERT_EQ(hb.basis.knots().size(), 16u);
  for (int i = 0; i < 50; ++i) {
    const double w = i / 49.0;
    EXPECT_NEAR(hb.basis.values(w).sum(), 1.0, 1e-12) << w;
    EXPECT_NEAR(hb.basis.derivs(w).sum(), 0.0, 1e-9) << w;
  }
}

TEST(HBasis, BsplineExplicitKnots) {
  SieveSpec s = spec_of(BasisKind::bspline, 6);
  s.h_basis.degree = 2;
  s.h_basis.interior_knots = {0.1, 0.5, 0.7};
  const auto hb = build_h_basis(s);
  for (int i = 0; i < 50; ++i) EXPECT_NEAR(hb.basis.values(i / 49.0).sum(), 1.0, 1e-12);
  // 1 + 3 breakpoints inside plus the ends.
  EXPECT_EQ(hb.basis.breakpoints().size(), 5u);
}

TEST(HBasis, InvalidKnotVectorsAreConfigErrors) {
  SieveSpec s = spec_of(BasisKind::bspline, 6);
  s.h_basis.interior_knots = {0.5, 0.4};
  EXPECT_THROW(build_h_basis(s), ConfigError);  // wrong count
  s = spec_of(BasisKind::bspline, 5);
  s.h_basis.interior_knots = {1.2};
  EXPECT_THROW(build_h_basis(s), ConfigError);  // outside (0,1)
  s = spec_of(BasisKind::bspline, 6);
  s.h_basis.interior_knots = {0.6, 0.3};
  EXPECT_THROW(build_h_basis(s), ConfigError);  // not increasing
  s = spec_of(BasisKind::bspline, 2);
  EXPECT_THROW(build_h_basis(s), ConfigError);  // K < degree + 1
  s = spec_of(BasisKind::legendre, 0);
  EXPECT_THROW(build_h_basis(s), ConfigError);
}

TEST(HBasis, DerivativesMatchCenteredDifferences) {
  for (BasisKind kind : {BasisKind::legendre, BasisKind::cosine, BasisKind::bspline}) {
    const int k = kind == BasisKind::bspline ? 9 : 8;
    const auto hb = build_h_basis(spec_of(kind, k));
    const double h = 1e-5;
    for (int i = 0; i < 100; ++i) {
      // Interior points away from the B-spline breakpoints multiples of 1/6.
      const double w = 0.0137 + 0.97 * i / 99.0;
      const Vec d = hb.basis.derivs(w);
      const Vec d2 = hb.basis.derivs2(w);
      const Vec fd = (hb.basis.values(w + h) - hb.basis.values(w - h)) / (2 * h);
      const Vec fd2 = (hb.basis.derivs(w + h) - hb.basis.derivs(w - h)) / (2 * h);
      for (int c = 0; c < k; ++c) {
        EXPECT_NEAR(d(c), fd(c), 1e-6 * std::max(1.0, std::abs(fd(c)))) << to_string(kind) << " k=" << c << " w=" << w;
        EXPECT_NEAR(d2(c), fd2(c), 1e-5 * std::max(1.0, std::abs(fd2(c)))) << to_string(kind) << " k=" << c;
      }
    }
  }
}

TEST(HBasis, GramMatricesSymmetricPsd) {
  for (BasisKind kind : {BasisKind::legendre, BasisKind::cosine, BasisKind::bspline}) {
    const auto hb = build_h_basis(spec_of(kind, 7));
    for (const Mat* g : {&hb.gram0, &hb.gram_d1, &hb.gram_d2}) {
      EXPECT_LE((*g - g->transpose()).cwiseAbs().maxCoeff(), 1e-14 * std::max(1.0, g->cwiseAbs().maxCoeff()));
      Eigen::SelfAdjointEigenSolver<Mat> es(*g);
      EXPECT_GE(es.eigenvalues().minCoeff(), -1e-9 * std::max(1.0, es.eigenvalues().maxCoeff()));
    }
  }
}

TEST(HBasis, GramQuadratureIsConverged) {
  // Cosine Gram of first derivatives is diag(0, (k pi)^2 / 2).
  const auto hb = build_h_basis(spec_of(BasisKind::cosine, 6));
  for (int k = 0; k < 6; ++k)
    for (int l = 0; l < 6; ++l) {
      const double expect = k == l && k > 0 ? std::pow(k * std::numbers::pi, 2) / 2.0 : 0.0;
      EXPECT_NEAR(hb.gram_d1(k, l), expect, 1e-10);
    }
}

TEST(QBasis, ConstantRawBasisHasUnitWhitener) {
  const auto qb = build_q_basis(spec_of(BasisKind::legendre, 3, 1), uniform_x(200, 1));
  ASSERT_EQ(qb.whitener.rows(), 1);
  EXPECT_NEAR(qb.whitener(0, 0), 1.0, 1e-15);
}

TEST(QBasis, WhitenedEmpiricalGramIsIdentity) {
  std::uint64_t seed = 10;
  for (BasisKind kind : {BasisKind::legendre, BasisKind::cosine, BasisKind::bspline}) {
    for (int j : {1, 2, 4, 5, 8}) {
      if (kind == BasisKind::bspline && j < 4) continue;
      for (std::size_t n : {50u, 500u, 5000u}) {
        const auto d = uniform_x(n, ++seed);
        const auto qb = build_q_basis(spec_of(kind, 3, j), d);
        EXPECT_LE(max_identity_deviation(whitened_gram(qb, d)), 1e-10) << to_string(kind) << " J=" << j << " n=" << n;
        EXPECT_TRUE(qb.whitener.isLowerTriangular());
      }
    }
  }
}

TEST(QBasis, HalfSamplesWhitenThemselves) {
  const auto d = uniform_x(1000, 3);
  std::vector<std::size_t> a, b;
  for (std::size_t i = 0; i < d.n(); ++i) (i < 500 ? a : b).push_back(i);
  const auto da = d.select(a), db = d.select(b);
  const auto s = spec_of(BasisKind::legendre, 3, 4);
  const auto qa = build_q_basis(s, da), qb = build_q_basis(s, db);
  EXPECT_GT((qa.whitener - qb.whitener).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE(max_identity_deviation(whitened_gram(qa, da)), 1e-10);
  EXPECT_LE(max_identity_deviation(whitened_gram(qb, db)), 1e-10);
}

TEST(QBasis, WhiteningIsIdempotent) {
  const auto d = uniform_x(800, 4);
  const auto qb = build_q_basis(spec_of(BasisKind::cosine, 3, 5), d);
  const Mat g = whitened_gram(qb, d);
  Eigen::LLT<Mat> llt(g);
  const Mat lower = llt.matrixL();
  const Mat again = lower.triangularView<Eigen::Lower>().solve(Mat::Identity(5, 5));
  EXPECT_LE(max_identity_deviation(again), 1e-8);
}

TEST(QBasis, RankDeficientGramIsDegenerateError) {
  Dataset d = uniform_x(100, 5);
  std::fill(d.x.begin(), d.x.end(), 0.3);
  try {
    build_q_basis(spec_of(BasisKind::legendre, 3, 3), d);
    FAIL() << "expected a degenerate-basis error";
  } catch (const DegenerateBasisError& e) {
    EXPECT_LT(e.eigenvalue(), 1e-10);
    EXPECT_NE(std::string(e.what()).find("smaller J"), std::string::npos);
  }
}

TEST(QBasis, PopulationWhitenerMatchesUniformLaw) {
  const auto qb = build_q_basis_population(spec_of(BasisKind::cosine, 3, 4));
  // Cosine basis under U(0,1): Gram = diag(1, 1/2, 1/2, 1/2).
  Vec expect(4);
  expect << 1.0, std::sqrt(2.0), std::sqrt(2.0), std::sqrt(2.0);
  EXPECT_LT((Mat(qb.whitener) - Mat(expect.asDiagonal())).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Penalty, ZeroCoefficientsGiveZero) {
  const auto s = spec_of(BasisKind::legendre, 5);
  const Mat d = penalty_matrix(s, build_h_basis(s));
  EXPECT_EQ(Vec::Zero(5).dot(d * Vec::Zero(5)), 0.0);
}

TEST(Penalty, CosineFirstHarmonicSobolev1) {
  auto s = spec_of(BasisKind::cosine, 4);
  s.penalty = PenaltyKind::sobolev1;
  const Mat d = penalty_matrix(s, build_h_basis(s));
  Vec pi = Vec::Zero(4);
  pi(1) = 1.0;  // h = cos(pi w)
  EXPECT_NEAR(pi.dot(d * pi), std::numbers::pi * std::numbers::pi / 2.0, 1e-10);
}

TEST(Penalty, QuadraticScalingAndPsd) {
  Rng r(6);
  for (BasisKind kind : {BasisKind::legendre, BasisKind::cosine, BasisKind::bspline}) {
    for (PenaltyKind pk : {PenaltyKind::sobolev1, PenaltyKind::sobolev12}) {
      auto s = spec_of(kind, 6);
      s.penalty = pk;
      const Mat d = penalty_matrix(s, build_h_basis(s));
      for (int it = 0; it < 1000; ++it) {
        Vec pi(6);
        for (int c = 0; c < 6; ++c) pi(c) = r.normal();
        const double p = pi.dot(d * pi);
        EXPECT_GE(p, -1e-10);
        if (it < 20) {
          const double c = r.normal() * 3;
          EXPECT_NEAR((c * pi).dot(d * (c * pi)), c * c * p, 1e-9 * std::max(1.0, c * c * p));
        }
      }
    }
  }
}

TEST(Penalty, SobolevControlsWeightedDerivative) {
  // sup_w |mu(w) h'(w)| <= C (1 + Pen) with the module constant, for many random pi.
  Rng r(7);
  const auto mu = WeightFn::quartic();
  double worst = 0.0;
  for (BasisKind kind : {BasisKind::legendre, BasisKind::cosine, BasisKind::bspline}) {
    auto s = spec_of(kind, 6);
    s.penalty = PenaltyKind::sobolev12;
    const auto hb = build_h_basis(s);
    const Mat d = penalty_matrix(s, hb);
    for (int it = 0; it < 1000; ++it) {
      Vec pi(6);
      const double scale = std::pow(10.0, r.uniform() * 4 - 3);
      for (int c = 0; c < 6; ++c) pi(c) = scale * r.normal();
      double sup = 0.0;
      for (int g = 0; g < 512; ++g) {
        const double w = g / 511.0;
        sup = std::max(sup, std::abs(mu.mu(w) * hb.dh(pi, w)));
      }
      const double pen = pi.dot(d * pi);
      worst = std::max(worst, sup / (1.0 + pen));
      EXPECT_LE(sup, kSobolevSupConstant * (1.0 + pen) + 1e-12);
    }
  }
  RecordProperty("worst_ratio", std::to_string(worst));
}
