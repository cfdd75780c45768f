// psgel command line: simulate, fit, qlr, ci, bound, curvature, report, run.

#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "psgel/psgel.hpp"

namespace {

using psgel::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitEstimation = 2;

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> flag_values;  // --<key> value, one per config key
  std::string data_file;
  std::string out_file;
};

// Every config key becomes a flag, e.g. --dgp.rho_e 0.3 or --fit.K 6.
void add_common(CLI::App* sub, Common& c, bool data_input) {
  sub->add_option("--config", c.config_file, "flat key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.sets, "override KEY=VALUE (repeatable)");
  for (const auto& key : psgel::config_keys()) sub->add_option("--" + key, c.flag_values[key], "config key " + key);
  if (data_input) sub->add_option("--data", c.data_file, "CSV with columns y,w,x (default: simulate)");
  sub->add_option("--out", c.out_file, "write output here instead of stdout");
}

psgel::ExperimentConfig resolve(const Common& c, CLI::App* sub) {
  psgel::ExperimentConfig cfg;
  if (!c.config_file.empty()) cfg = psgel::load_config(c.config_file, cfg);
  bool tau_given = false, fit_tau_given = false;
  for (const auto& key : psgel::config_keys()) {
    if (sub->count("--" + key) == 0) continue;
    psgel::set_config_value(cfg, key, c.flag_values.at(key));
    tau_given |= key == "dgp.tau";
    fit_tau_given |= key == "fit.tau";
  }
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw psgel::ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
    const std::string key = kv.substr(0, eq);
    psgel::set_config_value(cfg, key, kv.substr(eq + 1));
    tau_given |= key == "dgp.tau";
    fit_tau_given |= key == "fit.tau";
  }
  if (tau_given && !fit_tau_given) cfg.fit.tau = cfg.dgp.tau;
  cfg.validate();
  return cfg;
}

// The dataset of replication 0, or the CSV given by --data.
psgel::Dataset input_data(const Common& c, const psgel::ExperimentConfig& cfg) {
  if (!c.data_file.empty()) return psgel::load_csv(c.data_file);
  const auto seed = psgel::replication_seed(cfg.master_seed, 0);
  return psgel::simulate(cfg.dgp, cfg.n, psgel::stream_seed(seed, 0));
}

psgel::FitConfig fit_config(const psgel::ExperimentConfig& cfg) {
  psgel::FitConfig fc = cfg.fit;
  fc.seed = psgel::stream_seed(psgel::replication_seed(cfg.master_seed, 0), 1);
  return fc;
}

void emit(const Common& c, const json& j) {
  if (c.out_file.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(c.out_file);
  if (!out) throw psgel::ConfigError("cannot write '" + c.out_file + "'");
  out << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Penalized sieve GEL for nonparametric quantile IV: estimation, QLR inference, bound diagnostics"};
  app.require_subcommand(1);

  Common c_sim, c_fit, c_qlr, c_ci, c_bound, c_curv, c_run;
  auto* sim = app.add_subcommand("simulate", "draw a dataset from the configured design and write CSV");
  add_common(sim, c_sim, false);
  std::optional<std::uint64_t> sim_seed;
  sim->add_option("--seed", sim_seed, "explicit data seed (default: replication 0 of master_seed)");

  auto* fit = app.add_subcommand("fit", "unrestricted PSGEL fit");
  add_common(fit, c_fit, true);

  auto* qlr = app.add_subcommand("qlr", "QLR test of theta = nu");
  add_common(qlr, c_qlr, true);
  double nu = 0.0;
  qlr->add_option("--nu", nu, "null value for theta")->required();

  auto* ci = app.add_subcommand("ci", "test-inversion and self-normalized intervals");
  add_common(ci, c_ci, true);
  std::optional<double> centre;
  ci->add_option("--centre", centre, "grid centre (default: theta_hat)");

  auto* bound = app.add_subcommand("bound", "efficiency bound on the discretized operator");
  add_common(bound, c_bound, false);

  auto* curv = app.add_subcommand("curvature", "ill-posedness diagnostics of the population criterion");
  add_common(curv, c_curv, false);

  auto* rep = app.add_subcommand("report", "tables and plot CSVs from a results directory");
  std::string results_dir;
  rep->add_option("dir", results_dir, "results directory")->required();

  auto* run = app.add_subcommand("run", "Monte Carlo experiment per mode, with resume");
  add_common(run, c_run, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*sim) {
      const auto cfg = resolve(c_sim, sim);
      const auto seed = sim_seed ? *sim_seed : psgel::stream_seed(psgel::replication_seed(cfg.master_seed, 0), 0);
      const auto d = psgel::simulate(cfg.dgp, cfg.n, seed);
      if (c_sim.out_file.empty()) {
        std::cout << "y,w,x\n";
        std::cout.precision(17);
        for (std::size_t i = 0; i < d.n(); ++i) std::cout << d.y[i] << "," << d.w[i] << "," << d.x[i] << "\n";
      } else {
        psgel::write_csv(d, c_sim.out_file);
      }
    } else if (*fit) {
      const auto cfg = resolve(c_fit, fit);
      const auto d = input_data(c_fit, cfg);
      const auto fc = fit_config(cfg);
      const auto r = psgel::psgel_fit(d, fc);
      if (!std::isfinite(r.criterion)) {
        std::cerr << "estimation failed: no candidate with a finite criterion\n";
        return kExitEstimation;
      }
      emit(c_fit, psgel::to_json(r, fc.sieve.gamma_k));
    } else if (*qlr) {
      const auto cfg = resolve(c_qlr, qlr);
      const auto d = input_data(c_qlr, cfg);
      const auto fc = fit_config(cfg);
      emit(c_qlr, psgel::to_json(psgel::qlr(d, fc, nu), fc.sieve.gamma_k));
    } else if (*ci) {
      const auto cfg = resolve(c_ci, ci);
      const auto d = input_data(c_ci, cfg);
      const auto fc = fit_config(cfg);
      const auto u = psgel::psgel_fit(d, fc);
      const double mid = centre ? *centre : u.alpha_hat.theta;
      const auto grid = psgel::linear_grid(mid - cfg.inference.grid_half_width, mid + cfg.inference.grid_half_width,
                                           cfg.inference.grid_points);
      psgel::CiOptions opt;
      opt.bisection_width = cfg.inference.bisection_width;
      opt.multistart = cfg.inference.ci_multistart;
      json out;
      out["theta_hat"] = u.alpha_hat.theta;
      json inv = json::array(), sn = json::array();
      std::optional<psgel::RieszData> rz;
      try {
        rz = psgel::build_m_l_plugin(d, fc, u.alpha_hat);
        out["vstar_plugin"] = rz->vstar_norm;
      } catch (const psgel::RankDeficiencyError& e) {
        out["self_normalized_error"] = e.what();
      }
      for (double level : cfg.inference.levels) {
        inv.push_back(psgel::to_json(psgel::ci_invert(d, fc, level, grid, opt, u)));
        if (rz) {
          const auto iv = psgel::self_normalized_ci(u.alpha_hat.theta, rz->vstar_norm, d.n(), level);
          sn.push_back({{"level", level}, {"lo", iv.lo}, {"hi", iv.hi}});
        }
      }
      out["test_inversion"] = inv;
      out["self_normalized_plugin"] = sn;
      emit(c_ci, out);
    } else if (*bound) {
      auto cfg = resolve(c_bound, bound);
      cfg.mode = psgel::Mode::bound;
      emit(c_bound, psgel::bound_payload(psgel::make_context(cfg)));
    } else if (*curv) {
      auto cfg = resolve(c_curv, curv);
      cfg.mode = psgel::Mode::curvature;
      emit(c_curv, psgel::curvature_payload(psgel::make_context(cfg)));
    } else if (*rep) {
      const auto rf = psgel::report(results_dir);
      for (const auto& f : rf.written) std::cout << f << "\n";
      std::cout << "# records=" << rf.records << " corrupt=" << rf.corrupt << "\n";
    } else if (*run) {
      const auto cfg = resolve(c_run, run);
      const auto res = psgel::run(cfg);
      std::cerr << "executed " << res.executed << ", resumed " << res.skipped << "\n";
      emit(c_run, res.summary);
      if (res.summary.value("ok", 0) == 0) {
        std::cerr << "estimation failed on every replication\n";
        return kExitEstimation;
      }
    }
  } catch (const psgel::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const psgel::IngestionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "estimation failure: " << e.what() << "\n";
    return kExitEstimation;
  }
  return kExitOk;
}
