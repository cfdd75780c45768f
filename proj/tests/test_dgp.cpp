#include <gtest/gtest.h>

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "psgel/dgp.hpp"

using namespace psgel;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::path(::testing::TempDir()) / name).string();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
}

// Binned frequency of {Y <= h0(W)} over 10 equal X-bins.
std::vector<double> binned_frequency(const DgpSpec& spec, const Dataset& d, std::vector<int>* counts = nullptr) {
  std::vector<double> hit(10, 0.0);
  std::vector<int> cnt(10, 0);
  for (std::size_t i = 0; i < d.n(); ++i) {
    const int b = std::min(9, static_cast<int>(d.x[i] * 10));
    ++cnt[b];
    hit[b] += d.y[i] <= h0_value(spec.h0, d.w[i]);
  }
  for (int b = 0; b < 10; ++b) hit[b] /= cnt[b];
  if (counts) *counts = cnt;
  return hit;
}

}  // namespace

TEST(Simulate, ExogenousUnmixedDesignMakesWDeterministicAndResidualUncorrelated) {
  DgpSpec spec;
  spec.rho_e = 0.0;
  spec.b = 0.0;
  const std::size_t n = 100000;
  const auto d = simulate(spec, n, 11);
  double sw = 0, su = 0, sww = 0, suu = 0, suw = 0;
  for (std::size_t i = 0; i < n; ++i) {
    EXPECT_EQ(d.w[i], normal_cdf(spec.a * normal_quantile(d.x[i])));
    const double u = (d.y[i] - h0_value(spec.h0, d.w[i])) / spec.sigma;  // U* - z_tau
    sw += d.w[i], su += u, sww += d.w[i] * d.w[i], suu += u * u, suw += u * d.w[i];
  }
  const double m = static_cast<double>(n);
  const double cov = suw / m - (sw / m) * (su / m);
  const double corr = cov / std::sqrt((sww / m - sw * sw / (m * m)) * (suu / m - su * su / (m * m)));
  EXPECT_LT(std::abs(corr), 3.0 / std::sqrt(m));
}

TEST(Simulate, MedianRestrictionHoldsInEveryInstrumentBin) {
  DgpSpec spec;
  spec.tau = 0.5;
  spec.sigma = 1.0;
  spec.h0 = H0Kind::quadratic;
  const auto d = simulate(spec, 100000, 12);
  for (double f : binned_frequency(spec, d)) EXPECT_NEAR(f, 0.5, 0.02);
}

TEST(Simulate, QuantileRestrictionAcrossDesigns) {
  std::vector<DgpSpec> specs(4);
  specs[1].tau = 0.25;
  specs[1].rho_e = -0.7;
  specs[2].h0 = H0Kind::sine;
  specs[2].tau = 0.8;
  specs[2].a = 2.0;
  specs[3].h0 = H0Kind::linear;
  specs[3].rho_e = 0.9;
  specs[3].b = 1.5;
  std::uint64_t seed = 100;
  for (const auto& s : specs) {
    std::vector<int> cnt;
    const auto d = simulate(s, 100000, ++seed);
    const auto f = binned_frequency(s, d, &cnt);
    for (int b = 0; b < 10; ++b) {
      const double se = std::sqrt(s.tau * (1 - s.tau) / cnt[b]);
      EXPECT_NEAR(f[b], s.tau, 4.5 * se) << "tau=" << s.tau << " bin " << b;
    }
  }
}

TEST(Simulate, SameSeedSameData) {
  DgpSpec spec;
  const auto a = simulate(spec, 1000, 77);
  const auto b = simulate(spec, 1000, 77);
  EXPECT_TRUE(a == b);
  for (std::size_t i = 0; i < a.n(); ++i) {
    EXPECT_EQ(std::memcmp(&a.y[i], &b.y[i], sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(&a.w[i], &b.w[i], sizeof(double)), 0);
  }
  EXPECT_FALSE(a == simulate(spec, 1000, 78));
}

TEST(Simulate, InvalidSpecsAreConfigErrors) {
  DgpSpec s;
  s.tau = 1.0;
  EXPECT_THROW(simulate(s, 10, 1), ConfigError);
  s = {};
  s.sigma = 0.0;
  EXPECT_THROW(simulate(s, 10, 1), ConfigError);
  s = {};
  s.rho_e = 1.0;
  EXPECT_THROW(simulate(s, 10, 1), ConfigError);
  EXPECT_THROW(simulate(DgpSpec{}, 0, 1), ConfigError);
}

TEST(OracleTheta0, ConstantFunctionGivesZero) {
  DgpSpec s;
  s.h0 = H0Kind::constant;
  EXPECT_EQ(oracle_theta0(s, WeightFn::quartic()).value, 0.0);
}

TEST(OracleTheta0, LinearFunctionGivesMeanWeight) {
  DgpSpec s;
  s.h0 = H0Kind::linear;
  // E[w^2 (1-w)^2] under p_W by tanh-sinh over w with the density written out here.
  const double sc = std::hypot(s.a, s.b);
  auto pdf = [&](double w) {
    const double z = normal_quantile(w);
    return std::exp(-0.5 * z * z / (sc * sc) + 0.5 * z * z) / sc;
  };
  boost::math::quadrature::tanh_sinh<double> ts;
  const double e_mu = ts.integrate([&](double w) { return w * w * (1 - w) * (1 - w) * pdf(w); }, 0.0, 1.0);
  const double c = 0.37;
  const auto r = oracle_theta0(s, WeightFn::quartic(c / e_mu));
  EXPECT_NEAR(r.value, c, 1e-9);
  EXPECT_LT(r.abs_error, 1e-8);
}

TEST(OracleTheta0, QuadraticAgreesWithMonteCarlo) {
  DgpSpec s;
  s.h0 = H0Kind::quadratic;
  s.a = 1.0;
  s.b = 1.0;
  const auto mu = WeightFn::quartic(1.0);  // w^2 (1-w)^2
  const std::size_t n = 1000000;
  const auto d = simulate(s, n, 2024);
  double sum = 0, sum2 = 0;
  for (double w : d.w) {
    const double v = mu.mu(w) * 2.0 * w;
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n, se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_NEAR(oracle_theta0(s, mu).value, mean, 3.0 * se);
}

TEST(OracleTheta0, EveryShippedFunctionMatchesSimulation) {
  const auto mu = WeightFn::quartic();
  std::uint64_t seed = 500;
  for (H0Kind k : {H0Kind::constant, H0Kind::linear, H0Kind::quadratic, H0Kind::sine}) {
    DgpSpec s;
    s.h0 = k;
    const auto d = simulate(s, 200000, ++seed);
    double sum = 0, sum2 = 0;
    for (double w : d.w) {
      const double v = mu.mu(w) * h0_deriv(k, w);
      sum += v, sum2 += v * v;
    }
    const double n = static_cast<double>(d.n());
    const double mean = sum / n, se = std::sqrt(std::max(0.0, sum2 / n - mean * mean) / n);
    EXPECT_NEAR(oracle_theta0(s, mu).value, mean, 3.0 * se + 1e-12) << to_string(k);
  }
}

TEST(Oracle, MarginalDensityIntegratesToOne) {
  boost::math::quadrature::tanh_sinh<double> ts;
  for (double b : {0.3, 0.6, 1.5}) {
    DgpSpec s;
    s.b = b;
    const Oracle o(s);
    // Mass above 1 - 1e-16 is not representable in w, so integrate the lower
    // half (full precision near 0) and use the reflection w -> 1 - w.
    for (double w : {0.01, 0.2, 0.37}) EXPECT_NEAR(o.pdf_w(w), o.pdf_w(1.0 - w), 1e-12 * o.pdf_w(w));
    EXPECT_NEAR(2.0 * ts.integrate([&](double w) { return o.pdf_w(w); }, 0.0, 0.5), 1.0, 1e-6) << b;
  }
}

TEST(Oracle, ConditionalDensityOfWIntegratesToOne) {
  boost::math::quadrature::tanh_sinh<double> ts;
  const Oracle o(DgpSpec{});
  for (double x : {0.1, 0.5, 0.93})
    EXPECT_NEAR(ts.integrate([&](double w) { return o.cond_pdf_w_given_x(w, x); }, 0.0, 1.0), 1.0, 1e-6);
}

TEST(Oracle, EllIsDerivativeOfWeightTimesDensity) {
  const Oracle o(DgpSpec{});
  const auto mu = WeightFn::quartic();
  const double h = 1e-5;
  for (int i = 0; i < 100; ++i) {
    const double w = 0.005 + 0.99 * i / 99.0;
    const double fd = (mu.mu(w + h) * o.pdf_w(w + h) - mu.mu(w - h) * o.pdf_w(w - h)) / (2 * h);
    EXPECT_LE(std::abs(o.ell(w, mu) - fd), 1e-4 * std::max(std::abs(fd), 1e-2)) << w;
  }
}

TEST(Oracle, DensityDerivativeMatchesFiniteDifferences) {
  const Oracle o(DgpSpec{});
  const double h = 1e-6;
  for (double w = 0.02; w < 0.99; w += 0.07) {
    const double fd = (o.pdf_w(w + h) - o.pdf_w(w - h)) / (2 * h);
    EXPECT_NEAR(o.dpdf_w(w), fd, 1e-5 * std::max(1.0, std::abs(fd)));
  }
}

TEST(Oracle, ConditionalOutcomeDensityIsCdfDerivative) {
  const Oracle o(DgpSpec{});
  const double h = 1e-6;
  for (double y : {-0.5, 0.1, 0.4, 1.2}) {
    const double fd = (o.cond_cdf_y(y + h, 0.3, 0.6) - o.cond_cdf_y(y - h, 0.3, 0.6)) / (2 * h);
    EXPECT_NEAR(o.cond_pdf_y(y, 0.3, 0.6), fd, 1e-6);
  }
}

TEST(Oracle, ConditionalQuantileIsTrueFunction) {
  // P(Y <= h0(W) | W, X) averaged over V given X equals tau; at a fixed latent
  // draw the conditional CDF at h0 is Phi((z_tau - rho v)/sqrt(1-rho^2)).
  DgpSpec s;
  const Oracle o(s);
  for (double v : {-1.0, 0.0, 2.0}) {
    const double expect = normal_cdf((s.z_tau() - s.rho_e * v) / std::sqrt(1 - s.rho_e * s.rho_e));
    EXPECT_NEAR(o.cdf_y_given_xv(o.h0(0.4), 0.4, v), expect, 1e-14);
  }
}

TEST(LoadCsv, WellFormedThreeRows) {
  const auto p = temp_path("three.csv");
  write_text(p, "y,w,x\n0.1,0.2,0.3\n1,0.5,0.5\n-2.5e-1,0.9,0.01\n");
  const auto d = load_csv(p);
  EXPECT_EQ(d.n(), 3u);
  EXPECT_DOUBLE_EQ(d.y[2], -0.25);
  EXPECT_DOUBLE_EQ(d.x[2], 0.01);
}

TEST(LoadCsv, ColumnOrderFollowsHeader) {
  const auto p = temp_path("reordered.csv");
  write_text(p, "x,y,w\n0.3,0.1,0.2\n");
  const auto d = load_csv(p);
  EXPECT_DOUBLE_EQ(d.x[0], 0.3);
  EXPECT_DOUBLE_EQ(d.y[0], 0.1);
  EXPECT_DOUBLE_EQ(d.w[0], 0.2);
}

TEST(LoadCsv, NanRowIsRejectedWithItsIndex) {
  const auto p = temp_path("nan.csv");
  write_text(p, "y,w,x\n0.1,0.2,0.3\nNaN,0.5,0.5\n0.3,0.9,0.01\n");
  try {
    load_csv(p);
    FAIL() << "expected an ingestion error";
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.row(), 2u);
    EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
  }
}

TEST(LoadCsv, MalformedInputs) {
  const auto p = temp_path("bad.csv");
  write_text(p, "y,w\n0.1,0.2\n");
  EXPECT_THROW(load_csv(p), IngestionError);
  write_text(p, "y,w,x\n0.1,abc,0.2\n");
  EXPECT_THROW(load_csv(p), IngestionError);
  write_text(p, "y,w,x\n0.1,0.2\n");
  EXPECT_THROW(load_csv(p), IngestionError);
  write_text(p, "y,w,x\n");
  EXPECT_THROW(load_csv(p), IngestionError);
  EXPECT_THROW(load_csv(temp_path("does_not_exist.csv")), IngestionError);
}

TEST(LoadCsv, RoundTrip) {
  const auto d = simulate(DgpSpec{}, 500, 3);
  const auto p = temp_path("roundtrip.csv");
  write_csv(d, p);
  const auto e = load_csv(p);
  ASSERT_EQ(e.n(), d.n());
  for (std::size_t i = 0; i < d.n(); ++i) {
    EXPECT_NEAR(e.y[i], d.y[i], 1e-12);
    EXPECT_NEAR(e.w[i], d.w[i], 1e-12);
    EXPECT_NEAR(e.x[i], d.x[i], 1e-12);
  }
}
