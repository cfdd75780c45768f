#pragma once

// Experiment configuration, seeded Monte Carlo runs persisted as JSON lines,
// summaries and report tables.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "psgel/bound.hpp"
#include "psgel/dgp.hpp"
#include "psgel/error.hpp"
#include "psgel/estimator.hpp"
#include "psgel/inference.hpp"
#include "psgel/numeric.hpp"

namespace psgel {

using json = nlohmann::json;

enum class Mode { estimate, qlr_size, ci_coverage, bound, curvature, alr };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::estimate: return "estimate";
    case Mode::qlr_size: return "qlr_size";
    case Mode::ci_coverage: return "ci_coverage";
    case Mode::bound: return "bound";
    case Mode::curvature: return "curvature";
    case Mode::alr: return "alr";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  for (Mode m : {Mode::estimate, Mode::qlr_size, Mode::ci_coverage, Mode::bound, Mode::curvature, Mode::alr})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown mode '" + s + "'");
}

struct InferenceSpec {
  std::vector<double> levels{0.95};
  double nu = kInf;  // null value; non-finite means the true theta0
  double grid_half_width = 0.4;
  int grid_points = 9;
  double bisection_width = 1e-3;
  int ci_multistart = 1;
};

struct BoundSpec {
  int nw = 96;
  int nx = 96;
  double threshold = 1e-8;
  std::vector<int> sweep{2, 4, 6, 8, 10};  // truncation levels for the monotonicity sweep
};

struct CurvatureSpec {
  std::vector<double> t_grid{0.0, 0.05, 0.1, 0.2, 0.3, 0.5};
  std::vector<int> k_values{3, 6, 9};
  int multistart = 6;
};

struct ExperimentConfig {
  Mode mode = Mode::estimate;
  DgpSpec dgp{};
  FitConfig fit{};
  InferenceSpec inference{};
  BoundSpec bound{};
  CurvatureSpec curvature{};
  std::vector<std::size_t> alr_n{500, 2000};
  std::size_t n = 500;
  int reps = 1;
  std::uint64_t master_seed = 20240601;
  std::string output_dir = "results";
  int workers = 0;  // 0 = hardware concurrency; never affects results

  void validate() const {
    if (reps < 1) throw ConfigError("reps must be >= 1");
    if (n < 10) throw ConfigError("n must be >= 10");
    if (workers < 0) throw ConfigError("workers must be >= 0");
    dgp.validate();
    fit.validate();
    if (std::abs(fit.tau - dgp.tau) > 0.0) throw ConfigError("fit.tau and dgp.tau must agree");
    for (double l : inference.levels)
      if (!(l > 0.0 && l < 1.0)) throw ConfigError("inference.levels must lie in (0,1)");
    if (inference.levels.empty()) throw ConfigError("inference.levels is empty");
    if (inference.grid_points < 2) throw ConfigError("inference.grid_points must be >= 2");
    if (!(inference.grid_half_width > 0.0)) throw ConfigError("inference.grid_half_width must be positive");
    if (!(inference.bisection_width > 0.0)) throw ConfigError("inference.bisection_width must be positive");
    if (bound.nw < 8 || bound.nx < 8) throw ConfigError("bound grids need at least 8 nodes");
    if (curvature.t_grid.empty()) throw ConfigError("curvature.t_grid is empty");
    if (alr_n.empty()) throw ConfigError("alr.n_values is empty");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  if (t == "inf" || t == "theta0") return kInf;
  if (t == "-inf") return -kInf;
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': cannot parse '" + s + "' as a number");
  }
}

inline long long parse_int(const std::string& key, const std::string& s) {
  const std::string t = trim(s);
  long long v = 0;
  auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size())
    throw ConfigError("key '" + key + "': cannot parse '" + s + "' as an integer");
  return v;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& v, F f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += f(v[i]);
  }
  return out;
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  bool hashed = true;  // execution-only keys stay out of the hash
};

inline std::vector<double> parse_doubles(const std::string& key, const std::string& s) {
  std::vector<double> v;
  for (const auto& t : split_list(s)) v.push_back(parse_double(key, t));
  return v;
}

inline const std::map<std::string, Field>& config_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    auto dbl = [&](const std::string& key, auto member) {
      f[key] = {[member](const ExperimentConfig& c) { return fmt_double(member(const_cast<ExperimentConfig&>(c))); },
                [member, key](ExperimentConfig& c, const std::string& s) { member(c) = parse_double(key, s); }};
    };
    auto integer = [&](const std::string& key, auto member) {
      f[key] = {[member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); },
                [member, key](ExperimentConfig& c, const std::string& s) {
                  using T = std::remove_reference_t<decltype(member(c))>;
                  const long long v = parse_int(key, s);
                  if (std::is_unsigned_v<T> && v < 0) throw ConfigError("key '" + key + "' must be nonnegative");
                  member(c) = static_cast<T>(v);
                }};
    };
    f["mode"] = {[](const ExperimentConfig& c) { return to_string(c.mode); },
                 [](ExperimentConfig& c, const std::string& s) { c.mode = parse_mode(trim(s)); }};
    integer("reps", [](ExperimentConfig& c) -> int& { return c.reps; });
    integer("n", [](ExperimentConfig& c) -> std::size_t& { return c.n; });
    integer("master_seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.master_seed; });
    f["output_dir"] = {[](const ExperimentConfig& c) { return c.output_dir; },
                       [](ExperimentConfig& c, const std::string& s) { c.output_dir = trim(s); }, false};
    integer("workers", [](ExperimentConfig& c) -> int& { return c.workers; });
    f["workers"].hashed = false;

    dbl("dgp.tau", [](ExperimentConfig& c) -> double& { return c.dgp.tau; });
    f["dgp.h0"] = {[](const ExperimentConfig& c) { return to_string(c.dgp.h0); },
                   [](ExperimentConfig& c, const std::string& s) { c.dgp.h0 = parse_h0_kind(trim(s)); }};
    dbl("dgp.a", [](ExperimentConfig& c) -> double& { return c.dgp.a; });
    dbl("dgp.rho_e", [](ExperimentConfig& c) -> double& { return c.dgp.rho_e; });
    dbl("dgp.sigma", [](ExperimentConfig& c) -> double& { return c.dgp.sigma; });
    dbl("dgp.b", [](ExperimentConfig& c) -> double& { return c.dgp.b; });

    f["fit.family"] = {[](const ExperimentConfig& c) { return to_string(c.fit.family); },
                       [](ExperimentConfig& c, const std::string& s) { c.fit.family = parse_gel_kind(trim(s)); }};
    dbl("fit.tau", [](ExperimentConfig& c) -> double& { return c.fit.tau; });
    integer("fit.J", [](ExperimentConfig& c) -> int& { return c.fit.sieve.j_order; });
    integer("fit.K", [](ExperimentConfig& c) -> int& { return c.fit.sieve.k_order; });
    for (const std::string side : {"h", "q"}) {
      auto basis = [side](ExperimentConfig& c) -> BasisSpec& { return side == "h" ? c.fit.sieve.h_basis : c.fit.sieve.q_basis; };
      f["fit." + side + "_basis"] = {
          [basis](const ExperimentConfig& c) { return to_string(basis(const_cast<ExperimentConfig&>(c)).kind); },
          [basis](ExperimentConfig& c, const std::string& s) { basis(c).kind = parse_basis_kind(trim(s)); }};
      integer("fit." + side + "_degree", [basis](ExperimentConfig& c) -> int& { return basis(c).degree; });
      const std::string key = "fit." + side + "_knots";
      f[key] = {[basis](const ExperimentConfig& c) {
                  return join(basis(const_cast<ExperimentConfig&>(c)).interior_knots, fmt_double);
                },
                [basis, key](ExperimentConfig& c, const std::string& s) { basis(c).interior_knots = parse_doubles(key, s); }};
    }
    dbl("fit.gamma", [](ExperimentConfig& c) -> double& { return c.fit.sieve.gamma_k; });
    f["fit.penalty"] = {[](const ExperimentConfig& c) { return to_string(c.fit.sieve.penalty); },
                        [](ExperimentConfig& c, const std::string& s) { c.fit.sieve.penalty = parse_penalty_kind(trim(s)); }};
    dbl("fit.theta_lo", [](ExperimentConfig& c) -> double& { return c.fit.theta_lo; });
    dbl("fit.theta_hi", [](ExperimentConfig& c) -> double& { return c.fit.theta_hi; });
    f["fit.bandwidths"] = {[](const ExperimentConfig& c) { return join(c.fit.bandwidth_steps, fmt_double); },
                           [](ExperimentConfig& c, const std::string& s) {
                             c.fit.bandwidth_steps = parse_doubles("fit.bandwidths", s);
                           }};
    integer("fit.multistart", [](ExperimentConfig& c) -> int& { return c.fit.multistart; });
    integer("fit.stage_max_evals", [](ExperimentConfig& c) -> int& { return c.fit.stage_max_evals; });
    integer("fit.polish_rounds", [](ExperimentConfig& c) -> int& { return c.fit.polish_rounds; });
    dbl("fit.mu_scale", [](ExperimentConfig& c) -> double& { return c.fit.mu_scale; });
    dbl("fit.inner_tol", [](ExperimentConfig& c) -> double& { return c.fit.inner.tol; });
    integer("fit.inner_max_iter", [](ExperimentConfig& c) -> int& { return c.fit.inner.max_iter; });

    f["inference.levels"] = {[](const ExperimentConfig& c) { return join(c.inference.levels, fmt_double); },
                             [](ExperimentConfig& c, const std::string& s) {
                               c.inference.levels = parse_doubles("inference.levels", s);
                             }};
    f["inference.nu"] = {[](const ExperimentConfig& c) {
                           return std::isfinite(c.inference.nu) ? fmt_double(c.inference.nu) : std::string("theta0");
                         },
                         [](ExperimentConfig& c, const std::string& s) { c.inference.nu = parse_double("inference.nu", s); }};
    dbl("inference.grid_half_width", [](ExperimentConfig& c) -> double& { return c.inference.grid_half_width; });
    integer("inference.grid_points", [](ExperimentConfig& c) -> int& { return c.inference.grid_points; });
    dbl("inference.bisection_width", [](ExperimentConfig& c) -> double& { return c.inference.bisection_width; });
    integer("inference.ci_multistart", [](ExperimentConfig& c) -> int& { return c.inference.ci_multistart; });

    integer("bound.nw", [](ExperimentConfig& c) -> int& { return c.bound.nw; });
    integer("bound.nx", [](ExperimentConfig& c) -> int& { return c.bound.nx; });
    dbl("bound.threshold", [](ExperimentConfig& c) -> double& { return c.bound.threshold; });
    f["bound.sweep"] = {[](const ExperimentConfig& c) { return join(c.bound.sweep, [](int v) { return std::to_string(v); }); },
                        [](ExperimentConfig& c, const std::string& s) {
                          c.bound.sweep.clear();
                          for (const auto& t : split_list(s)) c.bound.sweep.push_back(static_cast<int>(parse_int("bound.sweep", t)));
                        }};
    f["curvature.t_grid"] = {[](const ExperimentConfig& c) { return join(c.curvature.t_grid, fmt_double); },
                             [](ExperimentConfig& c, const std::string& s) {
                               c.curvature.t_grid = parse_doubles("curvature.t_grid", s);
                             }};
    f["curvature.k_values"] = {
        [](const ExperimentConfig& c) { return join(c.curvature.k_values, [](int v) { return std::to_string(v); }); },
        [](ExperimentConfig& c, const std::string& s) {
          c.curvature.k_values.clear();
          for (const auto& t : split_list(s)) c.curvature.k_values.push_back(static_cast<int>(parse_int("curvature.k_values", t)));
        }};
    integer("curvature.multistart", [](ExperimentConfig& c) -> int& { return c.curvature.multistart; });
    f["alr.n_values"] = {[](const ExperimentConfig& c) {
                           return join(c.alr_n, [](std::size_t v) { return std::to_string(v); });
                         },
                         [](ExperimentConfig& c, const std::string& s) {
                           c.alr_n.clear();
                           for (const auto& t : split_list(s)) {
                             const long long v = parse_int("alr.n_values", t);
                             if (v < 10) throw ConfigError("alr.n_values entries must be >= 10");
                             c.alr_n.push_back(static_cast<std::size_t>(v));
                           }
                         }};
    return f;
  }();
  return fields;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& [key, _] : detail::config_fields()) k.push_back(key);
  return k;
}

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto& f = detail::config_fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(c, value);
}

inline std::string get_config_value(const ExperimentConfig& c, const std::string& key) {
  const auto& f = detail::config_fields();
  auto it = f.find(key);
  if (it == f.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(c);
}

// Flat `key = value` text; '#' starts a comment. The run's fit tau follows dgp.tau unless set.
inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  bool fit_tau_set = false, dgp_tau_set = false;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    set_config_value(base, key, line.substr(eq + 1));
    fit_tau_set |= key == "fit.tau";
    dgp_tau_set |= key == "dgp.tau";
  }
  if (dgp_tau_set && !fit_tau_set) base.fit.tau = base.dgp.tau;
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

// Sorted `key = value` lines. With hashed_only the execution keys are dropped.
inline std::string canonical_text(const ExperimentConfig& c, bool hashed_only = true) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) {
    if (hashed_only && !field.hashed) continue;
    out += key + " = " + field.get(c) + "\n";
  }
  return out;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(canonical_text(c))));
  return buf;
}

// ---------------------------------------------------------------------------
// JSON views of results.

namespace detail {

inline json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json vec_json(const Vec& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

inline double get_num(const json& j, const char* key, double fallback = std::nan("")) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_number()) return fallback;
  return it->get<double>();
}

}  // namespace detail

inline json to_json(const ParamPoint& a) { return {{"theta", detail::num(a.theta)}, {"pi", detail::vec_json(a.pi)}}; }

inline json to_json(const FitResult& r, double gamma) {
  json j;
  j["alpha_hat"] = to_json(r.alpha_hat);
  j["criterion"] = detail::num(r.criterion);
  j["gel_value"] = detail::num(r.gel_value);
  j["pen_value"] = detail::num(r.pen_value);
  j["restricted"] = r.restricted;
  j["boundary_hit"] = r.boundary_hit;
  j["multistart_disagreement"] = r.multistart_disagreement;
  j["below_identification_floor"] = r.below_identification_floor;
  j["evaluations"] = r.evaluations;
  j["rejected_candidates"] = r.rejected_candidates;
  j["inner_converged"] = r.inner.converged;
  j["inner_iterations"] = r.inner.iterations;
  j["penalty_bound_holds"] = penalty_bound_holds(r, gamma);
  json probes = json::array();
  for (std::size_t i = 0; i < r.probes.size(); ++i)
    probes.push_back({{"label", r.probes[i].first}, {"criterion", detail::num(r.probe_criteria[i])}});
  j["probes"] = probes;
  json starts = json::array();
  for (const auto& t : r.trace) {
    json s{{"label", t.label}, {"start_exact", detail::num(t.start_exact)}, {"final_exact", detail::num(t.final_exact)},
           {"duplicate", t.duplicate}, {"evaluations", t.evaluations}};
    json st = json::array();
    for (double v : t.stage_exact) st.push_back(detail::num(v));
    s["stage_exact"] = st;
    starts.push_back(s);
  }
  j["starts"] = starts;
  return j;
}

// Exact criterion at the last three stage ends of the winning start is non-increasing.
inline bool stages_monotone(const FitResult& r) {
  const StartTrace* best = nullptr;
  for (const auto& t : r.trace)
    if (!t.duplicate && (!best || t.final_exact < best->final_exact)) best = &t;
  if (!best || best->stage_exact.size() < 3) return true;
  const auto& s = best->stage_exact;
  const std::size_t m = s.size();
  return s[m - 2] <= s[m - 3] && s[m - 1] <= s[m - 2];
}

inline json to_json(const QlrResult& q, double gamma) {
  return {{"statistic", q.statistic}, {"nu", q.nu}, {"pvalue", q.pvalue}, {"clipped", q.clipped}, {"refit", q.refit},
          {"restricted", to_json(q.restricted, gamma)}, {"unrestricted", to_json(q.unrestricted, gamma)}};
}

inline json to_json(const CiResult& ci) {
  json iv = json::array();
  for (const auto& i : ci.intervals) iv.push_back({i.lo, i.hi});
  json st = json::array();
  for (double s : ci.statistics) st.push_back(detail::num(s));
  return {{"level", ci.level}, {"critical_value", ci.critical_value}, {"intervals", iv}, {"empty", ci.empty},
          {"argmin_nu", ci.argmin_nu}, {"theta_hat", ci.theta_hat}, {"grid", ci.grid}, {"statistics", st},
          {"restricted_fits", ci.restricted_fits}};
}

inline json to_json(const BoundResult& b) {
  return {{"v0", detail::num(b.v0)},
          {"eps_norm_sq", detail::num(b.eps_norm_sq)},
          {"correction_sq", detail::num(b.correction_sq)},
          {"svd_spectrum", detail::vec_json(b.svd_spectrum)},
          {"truncation_index", b.truncation_index},
          {"threshold", b.threshold},
          {"range_residual", b.range_residual},
          {"relative_range_residual", b.relative_range_residual},
          {"kernel_component", b.kernel_component},
          {"unreliable", b.unreliable},
          {"spectrum_slope", b.spectrum_slope},
          {"picard_partial_sums", b.picard_partial_sums}};
}

inline json to_json(const CurvatureReport& c) {
  json q = json::object();
  for (const auto& [k, v] : c.q_j_values) q[k] = detail::num(v);
  json vs = json::array();
  for (const auto& [t, v] : c.varpi_samples) vs.push_back({t, detail::num(v)});
  return {{"q_j_values", q},          {"varpi_samples", vs},        {"shell_minima", c.shell_minima},
          {"i_l_min_eig", c.i_l_min_eig}, {"arc_min_eig", c.arc_min_eig}, {"heuristic", c.heuristic},
          {"missing_t", c.missing_t}};
}

// ---------------------------------------------------------------------------
// Runs.

// Objects shared by all replications, computed once from the oracle.
struct RunContext {
  ExperimentConfig cfg;
  std::string hash;
  double theta0 = 0.0;
  std::shared_ptr<const Oracle> oracle;  // the population problem points into it
  std::optional<PopulationProblem> population;
  std::optional<PseudoTrueResult> pseudo;
  std::optional<RieszData> riesz;
};

inline RunContext make_context(const ExperimentConfig& cfg) {
  cfg.validate();
  RunContext ctx;
  ctx.cfg = cfg;
  ctx.hash = config_hash(cfg);
  ctx.oracle = std::make_shared<const Oracle>(cfg.dgp);
  ctx.theta0 = oracle_theta0(cfg.dgp, cfg.fit.weight()).value;
  if (cfg.mode == Mode::estimate || cfg.mode == Mode::alr) {
    ctx.population = make_population_problem(*ctx.oracle, cfg.fit);
    ctx.pseudo = pseudo_true(*ctx.population, cfg.fit);
    ctx.riesz = build_m_l_oracle(ctx.pseudo->alpha, *ctx.population);
  }
  return ctx;
}

inline std::uint64_t replication_seed(std::uint64_t master, std::size_t index) {
  return stream_seed(master, static_cast<std::uint64_t>(index));
}

inline json estimate_payload(const RunContext& ctx, const Dataset& data, const FitConfig& fc) {
  const auto& cfg = ctx.cfg;
  const FitResult fit = psgel_fit(data, fc);
  json p;
  p["theta0"] = ctx.theta0;
  p["theta_hat"] = fit.alpha_hat.theta;
  p["fit"] = to_json(fit, fc.sieve.gamma_k);
  p["stages_monotone"] = stages_monotone(fit);
  const double n = static_cast<double>(data.n());
  const double vs = ctx.riesz->vstar_norm;
  p["pseudo_theta"] = ctx.pseudo->alpha.theta;
  p["vstar_oracle"] = vs;
  p["z"] = std::sqrt(n) * (fit.alpha_hat.theta - ctx.theta0) / vs;
  json sn = json::array();
  for (double level : cfg.inference.levels) {
    const Interval iv = self_normalized_ci(fit.alpha_hat.theta, vs, data.n(), level);
    sn.push_back({{"level", level}, {"lo", iv.lo}, {"hi", iv.hi}, {"covers", iv.lo <= ctx.theta0 && ctx.theta0 <= iv.hi}});
  }
  p["sn_oracle"] = sn;
  try {
    const RieszData pl = build_m_l_plugin(data, fc, fit.alpha_hat);
    p["vstar_plugin"] = pl.vstar_norm;
    json snp = json::array();
    for (double level : cfg.inference.levels) {
      const Interval iv = self_normalized_ci(fit.alpha_hat.theta, pl.vstar_norm, data.n(), level);
      snp.push_back({{"level", level}, {"lo", iv.lo}, {"hi", iv.hi}, {"covers", iv.lo <= ctx.theta0 && ctx.theta0 <= iv.hi}});
    }
    p["sn_plugin"] = snp;
  } catch (const RankDeficiencyError& e) {
    p["sn_plugin_error"] = e.what();
  }
  return p;
}

inline json qlr_payload(const RunContext& ctx, const Dataset& data, const FitConfig& fc) {
  const double nu = std::isfinite(ctx.cfg.inference.nu) ? ctx.cfg.inference.nu : ctx.theta0;
  const QlrResult q = qlr(data, fc, nu);
  json p = to_json(q, fc.sieve.gamma_k);
  p["theta0"] = ctx.theta0;
  p["theta_hat"] = q.unrestricted.alpha_hat.theta;
  return p;
}

inline json ci_payload(const RunContext& ctx, const Dataset& data, const FitConfig& fc) {
  const auto& inf = ctx.cfg.inference;
  CiOptions opt;
  opt.bisection_width = inf.bisection_width;
  opt.multistart = inf.ci_multistart;
  const FitResult u = psgel_fit(data, fc);
  const auto grid = linear_grid(ctx.theta0 - inf.grid_half_width, ctx.theta0 + inf.grid_half_width, inf.grid_points);
  json p;
  p["theta0"] = ctx.theta0;
  p["theta_hat"] = u.alpha_hat.theta;
  p["unrestricted"] = to_json(u, fc.sieve.gamma_k);
  json cis = json::array();
  for (double level : inf.levels) {
    const CiResult ci = ci_invert(data, fc, level, grid, opt, u);
    json c = to_json(ci);
    c["covers"] = ci.covers(ctx.theta0);
    double len = 0.0;
    for (const auto& iv : ci.intervals) len += iv.hi - iv.lo;
    c["length"] = len;
    cis.push_back(c);
  }
  p["ci"] = cis;
  return p;
}

inline json bound_payload(const RunContext& ctx) {
  const auto& b = ctx.cfg.bound;
  const Oracle oracle(ctx.cfg.dgp);
  const OperatorGrid op = build_operator(oracle, static_cast<std::size_t>(b.nw), static_cast<std::size_t>(b.nx));
  const OperatorSvd svd = operator_svd(op);
  const WeightFn mu = ctx.cfg.fit.weight();
  json p;
  p["theta0"] = ctx.theta0;
  p["bound"] = to_json(v0_bound(op, oracle, mu, b.threshold, -1, &svd));
  json sweep = json::array();
  for (int k : b.sweep) {
    const BoundResult r = v0_bound(op, oracle, mu, b.threshold, k, &svd);
    sweep.push_back({{"keep", k}, {"v0", detail::num(r.v0)}, {"correction_sq", detail::num(r.correction_sq)}});
  }
  p["sweep"] = sweep;
  return p;
}

inline json curvature_payload(const RunContext& ctx) {
  const Oracle oracle(ctx.cfg.dgp);
  json p;
  p["theta0"] = ctx.theta0;
  json per_k = json::array();
  for (int k : ctx.cfg.curvature.k_values) {
    FitConfig fc = ctx.cfg.fit;
    fc.sieve.k_order = k;
    const PopulationProblem pop = make_population_problem(oracle, fc);
    const PseudoTrueResult pt = pseudo_true(pop, fc);
    const CurvatureReport rep = varpi_profile(pop, fc, pt.alpha, ctx.cfg.curvature.t_grid, ctx.cfg.curvature.multistart);
    json c = to_json(rep);
    c["K"] = k;
    c["pseudo_theta"] = pt.alpha.theta;
    per_k.push_back(c);
  }
  p["curvature"] = per_k;
  return p;
}

inline json alr_payload(const RunContext& ctx, std::uint64_t seed, const FitConfig& fc) {
  json p;
  p["theta0"] = ctx.theta0;
  json per_n = json::array();
  for (std::size_t i = 0; i < ctx.cfg.alr_n.size(); ++i) {
    const std::size_t n = ctx.cfg.alr_n[i];
    const Dataset data = simulate(ctx.cfg.dgp, n, stream_seed(seed, 100 + i));
    const FitResult fit = psgel_fit(data, fc);
    const AlrDraw d = alr_draw(data, fc, ctx.pseudo->alpha, *ctx.riesz, *ctx.population, fit);
    per_n.push_back({{"n", n}, {"lhs", d.lhs}, {"rhs", d.rhs}, {"scaled_gap", d.scaled_gap},
                     {"rhs_scaled", std::sqrt(static_cast<double>(n)) * d.rhs},
                     {"penalty_bound_holds", penalty_bound_holds(fit, fc.sieve.gamma_k)}});
  }
  p["alr"] = per_n;
  return p;
}

// One replication; failures come back as a structured record.
inline json run_replication(const RunContext& ctx, std::size_t index) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t seed = replication_seed(ctx.cfg.master_seed, index);
  json rec;
  rec["index"] = index;
  rec["seed"] = seed;
  rec["config_hash"] = ctx.hash;
  rec["mode"] = to_string(ctx.cfg.mode);
  FitConfig fc = ctx.cfg.fit;
  fc.seed = stream_seed(seed, 1);
  try {
    json payload;
    switch (ctx.cfg.mode) {
      case Mode::estimate: payload = estimate_payload(ctx, simulate(ctx.cfg.dgp, ctx.cfg.n, stream_seed(seed, 0)), fc); break;
      case Mode::qlr_size: payload = qlr_payload(ctx, simulate(ctx.cfg.dgp, ctx.cfg.n, stream_seed(seed, 0)), fc); break;
      case Mode::ci_coverage: payload = ci_payload(ctx, simulate(ctx.cfg.dgp, ctx.cfg.n, stream_seed(seed, 0)), fc); break;
      case Mode::bound: payload = bound_payload(ctx); break;
      case Mode::curvature: payload = curvature_payload(ctx); break;
      case Mode::alr: payload = alr_payload(ctx, seed, fc); break;
    }
    rec["status"] = "ok";
    rec["payload"] = payload;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    rec["status"] = "failed";
    rec["reason"] = e.what();
  }
  rec["wall_time"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// Reads a JSON-lines file; unparsable lines are counted, not fatal.
inline std::vector<json> read_records(const std::filesystem::path& path, int* corrupt = nullptr) {
  std::vector<json> out;
  int bad = 0;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    try {
      json j = json::parse(line);
      if (!j.is_object() || !j.contains("index") || !j["index"].is_number_unsigned() || !j.contains("status")) {
        ++bad;
        continue;
      }
      out.push_back(std::move(j));
    } catch (const json::exception&) {
      ++bad;
    }
  }
  if (corrupt) *corrupt = bad;
  return out;
}

// ---------------------------------------------------------------------------
// Summaries.

namespace detail {

struct Moments {
  double mean = std::nan("");
  double sd = std::nan("");
  std::size_t count = 0;
};

inline Moments moments_of(const std::vector<double>& v) {
  Moments m;
  m.count = v.size();
  if (v.empty()) return m;
  m.mean = pairwise_sum(v) / static_cast<double>(v.size());
  if (v.size() > 1) {
    std::vector<double> sq;
    for (double x : v) sq.push_back((x - m.mean) * (x - m.mean));
    m.sd = std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size() - 1));
  }
  return m;
}

inline double ks_normal(std::vector<double> z) {
  std::sort(z.begin(), z.end());
  const double m = static_cast<double>(z.size());
  double d = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double f = normal_cdf(z[i]);
    d = std::max({d, std::abs(f - i / m), std::abs(f - (i + 1) / m)});
  }
  return d;
}

inline double rate(std::size_t hits, std::size_t total) {
  return total ? static_cast<double>(hits) / static_cast<double>(total) : std::nan("");
}

}  // namespace detail

// QQ pairs: sorted statistics against chi2_1 quantiles at (i + 0.5) / m.
inline std::vector<std::pair<double, double>> qq_chi2(std::vector<double> stats) {
  std::sort(stats.begin(), stats.end());
  std::vector<std::pair<double, double>> out;
  const double m = static_cast<double>(stats.size());
  for (std::size_t i = 0; i < stats.size(); ++i) out.push_back({chi2_1_quantile((i + 0.5) / m), stats[i]});
  return out;
}

// Pearson correlation of the QQ pairs whose theoretical probability is at most `trim`.
inline double qq_correlation(const std::vector<std::pair<double, double>>& qq, double trim = 0.99) {
  const double cut = chi2_1_quantile(trim);
  std::vector<double> a, b;
  for (const auto& [t, s] : qq)
    if (t <= cut) a.push_back(t), b.push_back(s);
  if (a.size() < 3) return std::nan("");
  const auto ma = detail::moments_of(a), mb = detail::moments_of(b);
  std::vector<double> cross;
  for (std::size_t i = 0; i < a.size(); ++i) cross.push_back((a[i] - ma.mean) * (b[i] - mb.mean));
  const double cov = pairwise_sum(cross) / static_cast<double>(a.size() - 1);
  return cov / (ma.sd * mb.sd);
}

inline bool penalty_bound_ok(const json& fit) { return fit.value("penalty_bound_holds", false); }

// Summary of the records of one run, ordered by replication index.
inline json summarize(std::vector<json> records, int reps, int corrupt = 0) {
  std::sort(records.begin(), records.end(),
            [](const json& a, const json& b) { return a["index"].get<std::size_t>() < b["index"].get<std::size_t>(); });
  json s;
  std::set<std::size_t> seen;
  std::size_t ok = 0, failed = 0;
  std::vector<const json*> good;
  for (const auto& r : records) {
    seen.insert(r["index"].get<std::size_t>());
    if (r["status"] == "ok") {
      ++ok;
      good.push_back(&r);
    } else {
      ++failed;
    }
  }
  json missing = json::array();
  for (int i = 0; i < reps; ++i)
    if (!seen.count(static_cast<std::size_t>(i))) missing.push_back(i);
  s["reps"] = reps;
  s["records"] = records.size();
  s["ok"] = ok;
  s["failed"] = failed;
  s["corrupt"] = corrupt;
  s["missing_indices"] = missing;
  s["complete"] = missing.empty();
  if (good.empty()) return s;
  const std::string mode = (*good.front())["mode"];
  s["mode"] = mode;
  if (!records.empty()) s["config_hash"] = records.front()["config_hash"];
  const double theta0 = (*good.front())["payload"].value("theta0", std::nan(""));
  s["theta0"] = theta0;

  std::size_t bound_checked = 0, bound_ok = 0;
  auto check_bound = [&](const json& fit) {
    ++bound_checked;
    bound_ok += penalty_bound_ok(fit);
  };
  auto theta_table = [&](const std::vector<double>& th) {
    const auto m = detail::moments_of(th);
    std::vector<double> sq, ab;
    for (double t : th) sq.push_back((t - theta0) * (t - theta0)), ab.push_back(std::abs(t - theta0));
    return json{{"mean", m.mean},
                {"bias", m.mean - theta0},
                {"sd", m.sd},
                {"rmse", std::sqrt(pairwise_sum(sq) / static_cast<double>(th.size()))},
                {"mean_abs_error", pairwise_sum(ab) / static_cast<double>(th.size())},
                {"count", th.size()}};
  };

  if (mode == "estimate") {
    std::vector<double> th, z;
    std::size_t mono = 0, disagree = 0;
    std::map<double, std::pair<std::size_t, std::size_t>> cov, cov_pl;
    for (const json* r : good) {
      const json& p = (*r)["payload"];
      th.push_back(p["theta_hat"]);
      z.push_back(p["z"]);
      mono += p.value("stages_monotone", false);
      disagree += p["fit"].value("multistart_disagreement", false);
      check_bound(p["fit"]);
      for (const auto& c : p["sn_oracle"]) {
        auto& e = cov[c["level"].get<double>()];
        ++e.second;
        e.first += c["covers"].get<bool>();
      }
      if (p.contains("sn_plugin"))
        for (const auto& c : p["sn_plugin"]) {
          auto& e = cov_pl[c["level"].get<double>()];
          ++e.second;
          e.first += c["covers"].get<bool>();
        }
    }
    s["theta"] = theta_table(th);
    const auto mz = detail::moments_of(z);
    s["z"] = {{"mean", mz.mean}, {"sd", mz.sd}, {"ks_normal", detail::ks_normal(z)}};
    s["stage_monotone_rate"] = detail::rate(mono, good.size());
    s["multistart_disagreement_rate"] = detail::rate(disagree, good.size());
    json c = json::array();
    for (const auto& [level, e] : cov)
      c.push_back({{"level", level}, {"oracle", detail::rate(e.first, e.second)},
                   {"plugin", cov_pl.count(level) ? detail::rate(cov_pl[level].first, cov_pl[level].second) : std::nan("")}});
    s["self_normalized_coverage"] = c;
  } else if (mode == "qlr_size") {
    std::vector<double> stats, th;
    std::size_t clipped = 0, refit = 0;
    for (const json* r : good) {
      const json& p = (*r)["payload"];
      stats.push_back(p["statistic"]);
      th.push_back(p["theta_hat"]);
      clipped += p.value("clipped", false);
      refit += p.value("refit", false);
      check_bound(p["restricted"]);
      check_bound(p["unrestricted"]);
    }
    json rej = json::object();
    for (double a : {0.01, 0.05, 0.10}) {
      const double q = chi2_1_quantile(1.0 - a);
      std::size_t hits = 0;
      for (double st : stats) hits += st > q;
      rej[detail::fmt_double(a)] = detail::rate(hits, stats.size());
    }
    s["rejection_rate"] = rej;
    const auto qq = qq_chi2(stats);
    s["qq_correlation_trimmed99"] = qq_correlation(qq, 0.99);
    s["clip_rate"] = detail::rate(clipped, stats.size());
    s["refit_rate"] = detail::rate(refit, stats.size());
    const auto ms = detail::moments_of(stats);
    s["statistic"] = {{"mean", ms.mean}, {"sd", ms.sd}};
    s["theta"] = theta_table(th);
  } else if (mode == "ci_coverage") {
    std::map<double, std::vector<double>> lens;
    std::map<double, std::pair<std::size_t, std::size_t>> cov;
    std::map<double, std::size_t> empty;
    std::vector<double> th;
    for (const json* r : good) {
      const json& p = (*r)["payload"];
      th.push_back(p["theta_hat"]);
      check_bound(p["unrestricted"]);
      for (const auto& c : p["ci"]) {
        const double level = c["level"];
        auto& e = cov[level];
        ++e.second;
        e.first += c["covers"].get<bool>();
        empty[level] += c["empty"].get<bool>();
        lens[level].push_back(c["length"]);
      }
    }
    json c = json::array();
    for (const auto& [level, e] : cov)
      c.push_back({{"level", level}, {"coverage", detail::rate(e.first, e.second)},
                   {"empty_rate", detail::rate(empty[level], e.second)},
                   {"mean_length", detail::moments_of(lens[level]).mean}});
    s["coverage"] = c;
    s["theta"] = theta_table(th);
  } else if (mode == "bound") {
    const json& p = (*good.front())["payload"];
    s["bound"] = p["bound"];
    s["sweep"] = p["sweep"];
  } else if (mode == "curvature") {
    s["curvature"] = (*good.front())["payload"]["curvature"];
  } else if (mode == "alr") {
    std::map<std::size_t, std::vector<double>> gaps, rhs;
    for (const json* r : good)
      for (const auto& d : (*r)["payload"]["alr"]) {
        const std::size_t n = d["n"];
        gaps[n].push_back(std::abs(d["scaled_gap"].get<double>()));
        rhs[n].push_back(d["rhs_scaled"]);
        check_bound(d);
      }
    json a = json::array();
    for (auto& [n, g] : gaps) {
      const auto m = detail::moments_of(rhs[n]);
      a.push_back({{"n", n}, {"median_abs_gap", detail::quantile_sorted(g, 0.5)}, {"rhs_mean", m.mean},
                   {"rhs_var", m.sd * m.sd}, {"count", g.size()}});
    }
    s["alr"] = a;
  }
  if (bound_checked) s["penalty_bound_rate"] = detail::rate(bound_ok, bound_checked);
  return s;
}

// Flattens nested JSON scalars into dotted keys for the CSV summary.
inline void flatten(const json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
  } else if (j.is_array()) {
    for (std::size_t i = 0; i < j.size(); ++i) flatten(j[i], prefix + "." + std::to_string(i), out);
  } else {
    out.push_back({prefix, j.is_string() ? j.get<std::string>() : j.dump()});
  }
}

struct RunSummary {
  json summary;
  std::size_t executed = 0;  // replications run in this invocation
  std::size_t skipped = 0;   // already present from an earlier invocation
};

// Executes the missing replications of `cfg` into cfg.output_dir and writes
// records.jsonl, summary.json, summary.csv and config.txt.
inline RunSummary run(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  const fs::path dir(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output_dir '" + cfg.output_dir + "': " + ec.message());
  const fs::path rec_path = dir / "records.jsonl";
  const std::string hash = config_hash(cfg);

  // Resume: any well-formed record of this config counts as done.
  int corrupt = 0;
  std::vector<json> existing = read_records(rec_path, &corrupt);
  std::set<std::size_t> done;
  for (const auto& r : existing) {
    if (r.value("config_hash", "") != hash)
      throw ConfigError("output_dir holds records of a different config (hash " + r.value("config_hash", "?") + ")");
    done.insert(r["index"].get<std::size_t>());
  }
  std::vector<std::size_t> todo;
  for (int i = 0; i < cfg.reps; ++i)
    if (!done.count(static_cast<std::size_t>(i))) todo.push_back(static_cast<std::size_t>(i));

  {
    std::ofstream c(dir / "config.txt");
    c << canonical_text(cfg, false);
  }

  RunSummary out;
  out.skipped = done.size();
  if (!todo.empty()) {
    const RunContext ctx = make_context(cfg);
    bool torn = false;  // an interrupted writer may leave a partial last line
    {
      std::ifstream tail(rec_path, std::ios::binary | std::ios::ate);
      if (tail && tail.tellg() > 0) {
        tail.seekg(-1, std::ios::end);
        torn = tail.get() != '\n';
      }
    }
    std::ofstream append(rec_path, std::ios::app);
    if (!append) throw ConfigError("cannot write '" + rec_path.string() + "'");
    if (torn) append << "\n";
    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::exception_ptr config_failure;
    unsigned workers = cfg.workers > 0 ? static_cast<unsigned>(cfg.workers) : std::max(1u, std::thread::hardware_concurrency());
    workers = std::min<unsigned>(workers, static_cast<unsigned>(todo.size()));
    auto work = [&] {
      for (;;) {
        const std::size_t slot = next.fetch_add(1);
        if (slot >= todo.size()) return;
        json rec;
        try {
          rec = run_replication(ctx, todo[slot]);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!config_failure) config_failure = std::current_exception();
          next = todo.size();
          return;
        }
        std::lock_guard<std::mutex> lock(mu);
        append << rec.dump() << "\n";
        append.flush();
        existing.push_back(std::move(rec));
      }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (config_failure) std::rethrow_exception(config_failure);
    out.executed = todo.size();
  }

  out.summary = summarize(existing, cfg.reps, corrupt);
  {
    std::ofstream js(dir / "summary.json");
    js << out.summary.dump(2) << "\n";
    std::vector<std::pair<std::string, std::string>> flat;
    flatten(out.summary, "", flat);
    std::ofstream csv(dir / "summary.csv");
    csv << "key,value\n";
    for (const auto& [k, v] : flat) csv << k << "," << v << "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report tables from a results directory.

struct ReportFiles {
  std::vector<std::string> written;
  std::size_t records = 0;
  int corrupt = 0;
};

inline ReportFiles report(const std::string& results_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(results_dir);
  if (!fs::is_directory(dir)) throw ConfigError("results_dir '" + results_dir + "' is not a directory");
  ReportFiles rf;
  std::vector<json> recs = read_records(dir / "records.jsonl", &rf.corrupt);
  std::sort(recs.begin(), recs.end(),
            [](const json& a, const json& b) { return a["index"].get<std::size_t>() < b["index"].get<std::size_t>(); });
  rf.records = recs.size();
  int reps = 0;
  for (const auto& r : recs) reps = std::max(reps, static_cast<int>(r["index"].get<std::size_t>()) + 1);
  const json s = summarize(recs, reps, rf.corrupt);
  const std::string footer = "# records=" + std::to_string(recs.size()) + " corrupt=" + std::to_string(rf.corrupt) + "\n";
  auto open = [&](const std::string& name) {
    rf.written.push_back((dir / name).string());
    return std::ofstream(dir / name);
  };
  auto cell = [](const json& j, const char* key) {
    auto it = j.find(key);
    return it == j.end() ? std::string("") : it->dump();
  };

  {
    // (i) size and coverage: one row per (quantity, level).
    auto f = open("size_coverage.csv");
    f << "# quantity: rejection (QLR null rejection rate), ci_coverage (test inversion), sn_oracle / sn_plugin "
         "(self-normalized interval coverage); level: nominal level; value: empirical rate; count: replications\n";
    f << "quantity,level,value,count\n";
    if (s.contains("rejection_rate"))
      for (auto it = s["rejection_rate"].begin(); it != s["rejection_rate"].end(); ++it)
        f << "rejection," << it.key() << "," << it.value().dump() << "," << s["ok"].dump() << "\n";
    if (s.contains("coverage"))
      for (const auto& c : s["coverage"])
        f << "ci_coverage," << c["level"].dump() << "," << c["coverage"].dump() << "," << s["ok"].dump() << "\n";
    if (s.contains("self_normalized_coverage"))
      for (const auto& c : s["self_normalized_coverage"]) {
        f << "sn_oracle," << c["level"].dump() << "," << c["oracle"].dump() << "," << s["ok"].dump() << "\n";
        f << "sn_plugin," << c["level"].dump() << "," << c["plugin"].dump() << "," << s["ok"].dump() << "\n";
      }
    f << footer;
  }
  {
    // (ii) QQ of QLR against chi2_1.
    auto f = open("qq.csv");
    f << "# rank: position in sorted order; chi2_quantile: chi2_1 quantile at (rank+0.5)/m; statistic: sorted QLR draw\n";
    f << "rank,chi2_quantile,statistic\n";
    std::vector<double> stats;
    for (const auto& r : recs)
      if (r["status"] == "ok" && r["mode"] == "qlr_size") stats.push_back(r["payload"]["statistic"]);
    const auto qq = qq_chi2(stats);
    for (std::size_t i = 0; i < qq.size(); ++i)
      f << i << "," << detail::fmt_double(qq[i].first) << "," << detail::fmt_double(qq[i].second) << "\n";
    f << footer;
  }
  {
    // (iii) theta table.
    auto f = open("theta_table.csv");
    f << "# theta0: true value; mean, bias, sd, rmse, mean_abs_error of theta_hat over count replications\n";
    f << "theta0,mean,bias,sd,rmse,mean_abs_error,count\n";
    if (s.contains("theta")) {
      const json& t = s["theta"];
      f << s["theta0"].dump() << "," << cell(t, "mean") << "," << cell(t, "bias") << "," << cell(t, "sd") << ","
        << cell(t, "rmse") << "," << cell(t, "mean_abs_error") << "," << cell(t, "count") << "\n";
    }
    f << footer;
  }
  {
    // (iv) spectrum and curvature.
    auto f = open("spectrum.csv");
    f << "# index: singular value position; sigma: singular value of the weighted operator; picard_partial_sum: "
         "correction accumulated up to index (blank past the truncation)\n";
    f << "index,sigma,picard_partial_sum\n";
    if (s.contains("bound")) {
      const json& b = s["bound"];
      const auto& sp = b["svd_spectrum"];
      const auto& ps = b["picard_partial_sums"];
      for (std::size_t i = 0; i < sp.size(); ++i)
        f << i << "," << sp[i].dump() << "," << (i < ps.size() ? ps[i].dump() : "") << "\n";
    }
    f << footer;
    auto g = open("curvature.csv");
    g << "# K: sieve dimension; t: shell radius; varpi: exterior infimum of the excess criterion; i_l_min_eig: "
         "smallest eigenvalue of the local curvature matrix\n";
    g << "K,t,varpi,i_l_min_eig\n";
    if (s.contains("curvature"))
      for (const auto& c : s["curvature"])
        for (const auto& v : c["varpi_samples"])
          g << c["K"].dump() << "," << v[0].dump() << "," << v[1].dump() << "," << c["i_l_min_eig"].dump() << "\n";
    g << footer;
  }
  return rf;
}

}  // namespace psgel
