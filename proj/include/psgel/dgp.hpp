#pragma once

// Synthetic quantile-IV designs with exact oracle quantities, plus CSV I/O.
//
// Design (Gaussian copula, triangular):
//   X ~ U(0,1),  V, e ~ N(0,1) independent,
//   W  = Phi(a * Phi^{-1}(X) + b * V),
//   U* = rho * V + sqrt(1 - rho^2) * e,
//   Y  = h0(W) + sigma * (U* - z_tau).
// U* is independent of X, so P(Y <= h0(W) | X) = tau exactly.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "psgel/error.hpp"
#include "psgel/numeric.hpp"

namespace psgel {

struct Dataset {
  std::vector<double> y;
  std::vector<double> w;
  std::vector<double> x;

  std::size_t n() const { return y.size(); }

  void validate() const {
    if (y.empty()) throw ConfigError("dataset must have n >= 1");
    if (w.size() != y.size() || x.size() != y.size()) throw ConfigError("dataset columns differ in length");
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!std::isfinite(y[i]) || !std::isfinite(w[i]) || !std::isfinite(x[i]))
        throw ConfigError("dataset entry not finite at index " + std::to_string(i));
    }
  }

  // Subsample by index list (used for half-sample checks and permutations).
  Dataset select(const std::vector<std::size_t>& idx) const {
    Dataset out;
    out.y.reserve(idx.size());
    out.w.reserve(idx.size());
    out.x.reserve(idx.size());
    for (std::size_t i : idx) {
      out.y.push_back(y.at(i));
      out.w.push_back(w.at(i));
      out.x.push_back(x.at(i));
    }
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

enum class H0Kind { constant, linear, quadratic, sine };

inline std::string to_string(H0Kind k) {
  switch (k) {
    case H0Kind::constant: return "constant";
    case H0Kind::linear: return "linear";
    case H0Kind::quadratic: return "quadratic";
    case H0Kind::sine: return "sine";
  }
  return "?";
}

inline H0Kind parse_h0_kind(const std::string& s) {
  if (s == "constant") return H0Kind::constant;
  if (s == "linear") return H0Kind::linear;
  if (s == "quadratic") return H0Kind::quadratic;
  if (s == "sine") return H0Kind::sine;
  throw ConfigError("unknown h0 kind '" + s + "'");
}

inline double h0_value(H0Kind k, double w) {
  switch (k) {
    case H0Kind::constant: return 1.0;
    case H0Kind::linear: return w;
    case H0Kind::quadratic: return w * w;
    case H0Kind::sine: return std::sin(std::numbers::pi * w);
  }
  return 0.0;
}

inline double h0_deriv(H0Kind k, double w) {
  switch (k) {
    case H0Kind::constant: return 0.0;
    case H0Kind::linear: return 1.0;
    case H0Kind::quadratic: return 2.0 * w;
    case H0Kind::sine: return std::numbers::pi * std::cos(std::numbers::pi * w);
  }
  return 0.0;
}

struct DgpSpec {
  double tau = 0.5;
  H0Kind h0 = H0Kind::quadratic;
  double a = 1.0;      // instrument strength
  double rho_e = 0.5;  // endogeneity
  double sigma = 0.5;  // noise scale
  double b = 0.6;      // latent mixing

  void validate() const {
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("dgp: tau must lie in (0,1)");
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("dgp: sigma must be positive");
    if (!(std::abs(rho_e) < 1.0)) throw ConfigError("dgp: |rho_e| must be < 1");
    if (!std::isfinite(a) || !std::isfinite(b)) throw ConfigError("dgp: a and b must be finite");
    if (b < 0.0) throw ConfigError("dgp: mixing b must be nonnegative");
    if (a == 0.0 && b == 0.0) throw ConfigError("dgp: a and b cannot both be zero");
  }

  double z_tau() const { return normal_quantile(tau); }
};

// WAD weight mu and its derivative.
struct WeightFn {
  std::function<double(double)> mu;
  std::function<double(double)> dmu;
  double scale = 16.0;

  // mu(w) = scale * w^2 (1-w)^2; scale 16 gives max value 1.
  static WeightFn quartic(double scale = 16.0) {
    WeightFn f;
    f.scale = scale;
    f.mu = [scale](double w) { return scale * w * w * (1.0 - w) * (1.0 - w); };
    f.dmu = [scale](double w) { return scale * 2.0 * w * (1.0 - w) * (1.0 - 2.0 * w); };
    return f;
  }
};

inline Dataset simulate(const DgpSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  if (n == 0) throw ConfigError("simulate: n must be >= 1");
  Rng rng(seed);
  const double zt = spec.z_tau();
  const double cr = std::sqrt(1.0 - spec.rho_e * spec.rho_e);
  Dataset d;
  d.y.resize(n);
  d.w.resize(n);
  d.x.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform();
    const double v = rng.normal();
    const double e = rng.normal();
    const double w = normal_cdf(spec.a * normal_quantile(x) + spec.b * v);
    const double u = spec.rho_e * v + cr * e;
    d.x[i] = x;
    d.w[i] = w;
    d.y[i] = h0_value(spec.h0, w) + spec.sigma * (u - zt);
  }
  return d;
}

// Exact densities of the design. Conditional densities given (w, x) need b > 0;
// expectations over the latent (t, v) = (Phi^{-1}(X), V) work for any b.
class Oracle {
 public:
  explicit Oracle(DgpSpec spec) : spec_(spec) {
    spec_.validate();
    z_tau_ = spec_.z_tau();
    cond_sd_ = std::sqrt(1.0 - spec_.rho_e * spec_.rho_e);
    s_w_ = std::hypot(spec_.a, spec_.b);
  }

  const DgpSpec& spec() const { return spec_; }
  double tau() const { return spec_.tau; }
  double z_tau() const { return z_tau_; }
  // Standard deviation of Phi^{-1}(W).
  double w_scale() const { return s_w_; }

  double h0(double w) const { return h0_value(spec_.h0, w); }
  double dh0(double w) const { return h0_deriv(spec_.h0, w); }

  // W as a function of the latent coordinates.
  double w_of(double t, double v) const { return normal_cdf(spec_.a * t + spec_.b * v); }

  // P(Y <= yv | X, V=v) where W is determined by (X, V).
  double cdf_y_given_xv(double yv, double w, double v) const {
    return normal_cdf(standardized(yv, w, v));
  }
  double pdf_y_given_xv(double yv, double w, double v) const {
    return normal_pdf(standardized(yv, w, v)) / (spec_.sigma * cond_sd_);
  }

  double pdf_w(double w) const {
    if (!(w > 0.0 && w < 1.0)) return 0.0;
    const double z = normal_quantile(w);
    return normal_pdf(z / s_w_) / (s_w_ * normal_pdf(z));
  }

  double dpdf_w(double w) const {
    if (!(w > 0.0 && w < 1.0)) return 0.0;
    const double z = normal_quantile(w);
    const double f = normal_pdf(z / s_w_) / (s_w_ * normal_pdf(z));
    return f * z * (1.0 - 1.0 / (s_w_ * s_w_)) / normal_pdf(z);
  }

  double cond_pdf_w_given_x(double w, double x) const {
    require_mixing();
    if (!(w > 0.0 && w < 1.0) || !(x > 0.0 && x < 1.0)) return 0.0;
    const double z = normal_quantile(w);
    const double m = spec_.a * normal_quantile(x);
    return normal_pdf((z - m) / spec_.b) / (spec_.b * normal_pdf(z));
  }

  // Latent V implied by (w, x).
  double latent_v(double w, double x) const {
    require_mixing();
    return (normal_quantile(w) - spec_.a * normal_quantile(x)) / spec_.b;
  }

  double cond_pdf_y(double yv, double w, double x) const { return pdf_y_given_xv(yv, w, latent_v(w, x)); }
  double cond_cdf_y(double yv, double w, double x) const { return cdf_y_given_xv(yv, w, latent_v(w, x)); }

  // ell(w) = mu'(w) p_W(w) + mu(w) p_W'(w).
  double ell(double w, const WeightFn& mu) const { return mu.dmu(w) * pdf_w(w) + mu.mu(w) * dpdf_w(w); }

 private:
  double standardized(double yv, double w, double v) const {
    return (yv - h0(w) + spec_.sigma * z_tau_ - spec_.sigma * spec_.rho_e * v) / (spec_.sigma * cond_sd_);
  }
  void require_mixing() const {
    if (!(spec_.b > 0.0)) throw ConfigError("oracle: conditional densities given (w,x) require b > 0");
  }

  DgpSpec spec_;
  double z_tau_ = 0.0;
  double cond_sd_ = 1.0;
  double s_w_ = 1.0;
};

struct Theta0Result {
  double value = 0.0;
  double abs_error = 0.0;
};

// theta0 = E[mu(W) h0'(W)], integrating over Phi^{-1}(W) ~ N(0, a^2 + b^2).
inline Theta0Result oracle_theta0(const DgpSpec& spec, const WeightFn& mu, double tol = 1e-8) {
  spec.validate();
  const double s = std::hypot(spec.a, spec.b);
  auto integrand = [&](double z) {
    const double w = normal_cdf(s * z);
    return mu.mu(w) * h0_deriv(spec.h0, w) * normal_pdf(z);
  };
  double err = 0.0;
  const double inf = std::numeric_limits<double>::infinity();
  const double value =
      boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, -inf, inf, 15, 1e-13, &err);
  if (!(err < tol)) throw NumericalError("oracle_theta0: quadrature did not converge", err);
  return {value, err};
}

// ---------------------------------------------------------------------------
// CSV ingestion. Header must name the columns y, w, x (any order).

inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open '" + path + "'", 0);
  std::string line;
  if (!std::getline(in, line)) throw IngestionError("missing header", 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      const auto b = cell.find_first_not_of(" \t");
      const auto e = cell.find_last_not_of(" \t");
      out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
    }
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  const auto header = split(line);
  int iy = -1, iw = -1, ix = -1;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == "y") iy = static_cast<int>(c);
    if (header[c] == "w") iw = static_cast<int>(c);
    if (header[c] == "x") ix = static_cast<int>(c);
  }
  if (iy < 0 || iw < 0 || ix < 0) throw IngestionError("header must contain columns y,w,x", 0);
  Dataset d;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++row;
    const auto cells = split(line);
    if (cells.size() != header.size()) throw IngestionError("wrong number of fields", row);
    auto parse = [&](int c) {
      const std::string& s = cells[static_cast<std::size_t>(c)];
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(s, &used);
      } catch (const std::exception&) {
        throw IngestionError("cannot parse '" + s + "'", row);
      }
      if (used != s.size()) throw IngestionError("cannot parse '" + s + "'", row);
      if (!std::isfinite(v)) throw IngestionError("non-finite entry '" + s + "'", row);
      return v;
    };
    d.y.push_back(parse(iy));
    d.w.push_back(parse(iw));
    d.x.push_back(parse(ix));
  }
  if (d.n() == 0) throw IngestionError("no data rows", 0);
  return d;
}

inline void write_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << "y,w,x\n" << std::setprecision(17);
  for (std::size_t i = 0; i < d.n(); ++i) out << d.y[i] << ',' << d.w[i] << ',' << d.x[i] << '\n';
}

}  // namespace psgel
