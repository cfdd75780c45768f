// Acceptance checks, one per criterion: `acceptance --criterion N --workdir DIR`.
// Monte Carlo runs live under DIR and are resumed, so criteria that share a run reuse it.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "psgel/psgel.hpp"

using namespace psgel;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

fs::path g_workdir;

// Monte Carlo designs behind criteria 4-7.
ExperimentConfig mc_config(int criterion) {
  ExperimentConfig c;
  c.fit.sieve.j_order = 5;
  c.fit.sieve.k_order = 3;
  c.n = 500;
  switch (criterion) {
    case 4:
      c.mode = Mode::qlr_size;
      c.reps = 500;
      break;
    case 5:
      c.mode = Mode::ci_coverage;
      c.reps = 300;
      c.inference.levels = {0.95};
      break;
    case 6:
      c.mode = Mode::estimate;
      c.reps = 500;
      c.n = 2000;
      break;
    case 7:
      c.mode = Mode::estimate;
      c.reps = 100;
      c.n = 2000;
      c.dgp.rho_e = 0.0;
      c.dgp.h0 = H0Kind::linear;
      c.fit.sieve.k_order = 2;
      break;
    default: throw ConfigError("no Monte Carlo design for criterion " + std::to_string(criterion));
  }
  c.output_dir = (g_workdir / ("c" + std::to_string(criterion) + "_" + to_string(c.mode))).string();
  return c;
}

RunSummary run_logged(const ExperimentConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  RunSummary r = run(c);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "  run " << c.output_dir << ": executed " << r.executed << ", resumed " << r.skipped << ", "
            << num(secs) << " s\n";
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome c1_cue_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng r(1001);
  double worst_lambda = 0.0, worst_value = 0.0;
  int unconverged = 0, redrawn = 0;
  for (int inst = 0; inst < 200; ++inst) {
    DgpSpec spec;
    spec.rho_e = -0.9 + 1.8 * r.uniform();
    const auto d = simulate(spec, 100, r.next_u64());
    FitConfig fc;
    fc.sieve.j_order = 1 + static_cast<int>(r.next_u64() % 5);
    fc.sieve.k_order = 1 + static_cast<int>(r.next_u64() % 5);
    const Bases b = make_bases(fc, d);
    // Perturbations of the truth. A far-off point can put every residual indicator
    // on one side, h_mat is then singular and lambda* undefined; such draws are redrawn.
    const Oracle o(spec);
    const ParamPoint truth{oracle_theta0(spec, b.mu).value, project_h0(o, b.h)};
    Mat g, h;
    for (;;) {
      ParamPoint a = truth;
      a.theta += 0.3 * r.normal();
      for (int k = 0; k < fc.sieve.k_order; ++k) a.pi(k) += 0.3 * r.normal();
      g = make_design(d, b, fc.tau).moments(a);
      h = g.transpose() * g / static_cast<double>(g.rows());
      Eigen::SelfAdjointEigenSolver<Mat> es(h);
      if (es.eigenvalues().minCoeff() > 1e-8 * es.eigenvalues().maxCoeff()) break;
      ++redrawn;
    }
    const auto sol = inner_maximize(g, s_family(GelKind::CUE));
    unconverged += !sol.converged;
    const Vec gbar = g.colwise().mean().transpose();
    const auto ldlt = h.ldlt();
    const Vec lam = -ldlt.solve(gbar);
    const double val = 0.5 * gbar.dot(ldlt.solve(gbar));
    worst_lambda = std::max(worst_lambda, (sol.lambda - lam).norm() / std::max(lam.norm(), 1e-300));
    worst_value = std::max(worst_value, std::abs(sol.value - val) / std::max(val, 1e-300));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  Outcome o;
  o.pass = worst_lambda <= 1e-8 && worst_value <= 1e-8 && unconverged == 0 && secs < 60.0;
  o.detail = "max_rel_err_lambda=" + num(worst_lambda) + " max_rel_err_value=" + num(worst_value) +
             " unconverged=" + std::to_string(unconverged) +
             " singular_redraws=" + std::to_string(redrawn) + " seconds=" + num(secs);
  return o;
}

double max_identity_deviation(const Mat& m) { return (m - Mat::Identity(m.rows(), m.cols())).cwiseAbs().maxCoeff(); }

Outcome c2_whitening() {
  double worst = 0.0;
  std::size_t datasets = 0;
  auto check = [&](const Dataset& d, const SieveSpec& s) {
    const QBasis qb = build_q_basis(s, d);
    const Mat q = q_matrix(qb, d.x);
    worst = std::max(worst, max_identity_deviation(q.transpose() * q / static_cast<double>(d.n())));
    ++datasets;
  };
  // Every dataset of the Monte Carlo runs, regenerated from its replication seed.
  for (int c : {4, 5, 6, 7}) {
    const auto cfg = mc_config(c);
    for (int i = 0; i < cfg.reps; ++i) {
      const auto seed = replication_seed(cfg.master_seed, static_cast<std::size_t>(i));
      check(simulate(cfg.dgp, cfg.n, stream_seed(seed, 0)), cfg.fit.sieve);
    }
  }
  // And a sweep over instrument bases, dimensions and sample sizes.
  std::uint64_t seed = 2000;
  for (BasisKind kind : {BasisKind::legendre, BasisKind::bspline, BasisKind::cosine})
    for (int j = 1; j <= 8; ++j)
      for (std::size_t n : {50u, 100u, 500u, 2000u}) {
        SieveSpec s;
        s.q_basis.kind = kind;
        if (kind == BasisKind::bspline && j <= s.q_basis.degree) continue;  // needs J > degree
        s.j_order = j;
        check(simulate(DgpSpec{}, n, ++seed), s);
      }
  return {worst <= 1e-10, "max_abs_deviation=" + num(worst) + " datasets=" + std::to_string(datasets)};
}

Outcome c3_penalty_bound() {
  Outcome o{true, ""};
  std::size_t fitted = 0, failed = 0;
  for (int c : {4, 5, 6, 7}) {
    const auto s = run_logged(mc_config(c)).summary;
    const double rate = s.value("penalty_bound_rate", std::nan(""));
    fitted += s.value("ok", std::size_t{0});
    failed += s.value("failed", std::size_t{0});
    o.pass = o.pass && rate == 1.0;
    o.detail += "c" + std::to_string(c) + "_rate=" + num(rate) + " ";
  }
  o.detail += "fitted_runs=" + std::to_string(fitted) + " failed_runs=" + std::to_string(failed);
  return o;
}

Outcome c4_qlr_size() {
  const auto s = run_logged(mc_config(4)).summary;
  const double rej = s["rejection_rate"].value("0.05", std::nan(""));
  const double qq = s.value("qq_correlation_trimmed99", std::nan(""));
  return {rej >= 0.02 && rej <= 0.10 && qq > 0.95,
          "rejection_05=" + num(rej) + " qq_corr_trim99=" + num(qq) + " ok=" + s["ok"].dump() + " failed=" +
              s["failed"].dump()};
}

Outcome c5_ci_coverage() {
  const auto s = run_logged(mc_config(5)).summary;
  double cov = std::nan(""), len = std::nan(""), empty = std::nan("");
  for (const auto& c : s["coverage"])
    if (c["level"].get<double>() == 0.95) cov = c["coverage"], len = c["mean_length"], empty = c["empty_rate"];
  return {cov >= 0.90 && cov <= 0.99, "coverage_95=" + num(cov) + " mean_length=" + num(len) + " empty_rate=" +
                                          num(empty) + " ok=" + s["ok"].dump() + " failed=" + s["failed"].dump()};
}

Outcome c6_normality() {
  const auto s = run_logged(mc_config(6)).summary;
  const double ks = s["z"].value("ks_normal", std::nan(""));
  return {ks <= 0.08, "ks_distance=" + num(ks) + " z_mean=" + num(s["z"]["mean"]) + " z_sd=" + num(s["z"]["sd"]) +
                          " ok=" + s["ok"].dump() + " failed=" + s["failed"].dump()};
}

Outcome c7_exogenous_linear() {
  const auto s = run_logged(mc_config(7)).summary;
  const double mae = s["theta"].value("mean_abs_error", std::nan(""));
  return {mae <= 0.05, "mean_abs_error=" + num(mae) + " theta0=" + num(s["theta0"]) + " bias=" + num(s["theta"]["bias"]) +
                           " ok=" + s["ok"].dump() + " failed=" + s["failed"].dump()};
}

Outcome c8_operator() {
  const Oracle oracle(DgpSpec{});
  const BoundSpec bs;
  const OperatorGrid op = build_operator(oracle, static_cast<std::size_t>(bs.nw), static_cast<std::size_t>(bs.nx));
  Rng r(8008);
  double worst_adj = 0.0;
  for (int it = 0; it < 100; ++it) {
    Vec g(static_cast<Eigen::Index>(op.nw())), f(static_cast<Eigen::Index>(op.nx()));
    for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = r.normal();
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = r.normal();
    const double lhs = op.inner_x(op.apply(g), f), rhs = op.inner_w(g, op.apply_adjoint(f));
    worst_adj = std::max(worst_adj, std::abs(lhs - rhs) / std::sqrt(op.inner_w(g, g) * op.inner_x(f, f)));
  }
  const OperatorSvd svd = operator_svd(op);
  const int k = truncation_count(svd.sigma, bs.threshold);
  const Mat p = range_projection(svd, k);
  const double idem = (p * p - p).norm();
  const WeightFn mu = WeightFn::quartic();
  const BoundResult base = v0_bound(op, oracle, mu, bs.threshold, -1, &svd);
  bool additive = base.v0 == base.eps_norm_sq + base.correction_sq;
  bool monotone = true;
  std::string sweep;
  double prev = -kInf;
  for (int keep : bs.sweep) {
    const BoundResult b = v0_bound(op, oracle, mu, bs.threshold, keep, &svd);
    additive = additive && b.v0 == b.eps_norm_sq + b.correction_sq;
    monotone = monotone && b.v0 >= prev;
    prev = b.v0;
    sweep += (sweep.empty() ? "" : ",") + num(b.v0);
  }
  return {worst_adj <= 1e-6 && idem <= 1e-8 && additive && monotone,
          "adjoint_rel=" + num(worst_adj) + " idempotency=" + num(idem) + " additive=" + (additive ? "yes" : "no") +
              " v0_sweep=" + sweep + " v0=" + num(base.v0) + " truncation=" + std::to_string(base.truncation_index)};
}

Outcome c9_curvature() {
  ExperimentConfig c;
  c.mode = Mode::curvature;
  c.fit.sieve.j_order = 5;
  c.output_dir = (g_workdir / "c9_curvature").string();
  const auto s = run_logged(c).summary;
  Outcome o{s.value("ok", 0) == 1, ""};
  double prev_eig = kInf;
  for (const auto& k : s["curvature"]) {
    const auto& v = k["varpi_samples"];
    bool zero = v.size() == c.curvature.t_grid.size() && v[0][0].get<double>() == 0.0 && v[0][1].get<double>() == 0.0;
    bool mono = true;
    for (std::size_t i = 1; i < v.size(); ++i) mono = mono && v[i][1].get<double>() >= v[i - 1][1].get<double>() - 1e-8;
    const double eig = k["i_l_min_eig"];
    o.pass = o.pass && zero && mono && eig < prev_eig;
    prev_eig = eig;
    o.detail += "K=" + k["K"].dump() + ":varpi0=" + (zero ? "0" : "nonzero") + ",monotone=" + (mono ? "yes" : "no") +
                ",e_min=" + num(eig) + " ";
  }
  return o;
}

Outcome c10_determinism() {
  Outcome o{true, ""};
  auto compare = [&](const std::string& label, ExperimentConfig a, const fs::path& ref_dir, int workers) {
    a.workers = workers;
    a.output_dir = (g_workdir / ("c10_" + label + "_w" + std::to_string(workers))).string();
    fs::remove_all(a.output_dir);  // a genuine repeat, not a resume
    run_logged(a);
    const bool same = slurp(fs::path(a.output_dir) / "summary.json") == slurp(ref_dir / "summary.json") &&
                      slurp(fs::path(a.output_dir) / "summary.csv") == slurp(ref_dir / "summary.csv");
    o.pass = o.pass && same;
    o.detail += label + "_workers" + std::to_string(workers) + "=" + (same ? "identical" : "DIFFERENT") + " ";
  };
  // Repeat of the criterion 7 run with three workers.
  const auto c7 = mc_config(7);
  run_logged(c7);
  compare("c7", c7, c7.output_dir, 3);
  // A small QLR run, one worker against two and three.
  ExperimentConfig q;
  q.mode = Mode::qlr_size;
  q.n = 300;
  q.reps = 12;
  q.fit.sieve.j_order = 5;
  q.workers = 1;
  q.output_dir = (g_workdir / "c10_qlr_w1").string();
  fs::remove_all(q.output_dir);
  run_logged(q);
  compare("qlr", q, q.output_dir, 2);
  compare("qlr", q, q.output_dir, 3);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  int criterion = 0;
  std::string workdir = "acceptance_runs";
  app.add_option("--criterion", criterion, "criterion number 1-10")->required()->check(CLI::Range(1, 10));
  app.add_option("--workdir", workdir, "directory for Monte Carlo runs");
  CLI11_PARSE(app, argc, argv);
  g_workdir = workdir;
  fs::create_directories(g_workdir);

  Outcome o;
  try {
    switch (criterion) {
      case 1: o = c1_cue_oracle(); break;
      case 2: o = c2_whitening(); break;
      case 3: o = c3_penalty_bound(); break;
      case 4: o = c4_qlr_size(); break;
      case 5: o = c5_ci_coverage(); break;
      case 6: o = c6_normality(); break;
      case 7: o = c7_exogenous_linear(); break;
      case 8: o = c8_operator(); break;
      case 9: o = c9_curvature(); break;
      case 10: o = c10_determinism(); break;
    }
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  std::cout << "criterion " << criterion << ": " << (o.pass ? "PASS" : "FAIL") << " " << o.detail << std::endl;
  return o.pass ? 0 : 1;
}
