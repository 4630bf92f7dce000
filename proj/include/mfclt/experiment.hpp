#pragma once

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "clt.hpp"
#include "errors.hpp"
#include "functional.hpp"
#include "json.hpp"
#include "law.hpp"
#include "mean_field.hpp"
#include "metrics.hpp"
#include "registry.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace mfclt {

inline constexpr const char* kArtifactVersion = "1.0.0";

enum class ExperimentKind { Clt, Decompose, Scaling, MeanField, DerivCheck, Metrics };

inline const char* kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Clt: return "clt";
    case ExperimentKind::Decompose: return "decompose";
    case ExperimentKind::Scaling: return "scaling";
    case ExperimentKind::MeanField: return "meanfield";
    case ExperimentKind::DerivCheck: return "derivcheck";
    case ExperimentKind::Metrics: return "metrics";
  }
  return "?";
}

inline std::optional<ExperimentKind> parse_kind(const std::string& text) {
  for (auto k : {ExperimentKind::Clt, ExperimentKind::Decompose, ExperimentKind::Scaling, ExperimentKind::MeanField,
                 ExperimentKind::DerivCheck, ExperimentKind::Metrics}) {
    if (text == kind_name(k)) return k;
  }
  return std::nullopt;
}

// "section.key" -> raw value.
using ConfigMap = std::map<std::string, std::string>;

struct ConfigKey {
  const char* key;
  const char* flag;
  const char* help;
  bool is_switch = false;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"experiment.kind", "kind", "clt, decompose, scaling, meanfield, derivcheck or metrics"},
      {"experiment.functional", "functional", "registry functional name (derivcheck also accepts 'all')"},
      {"experiment.seed", "seed", "RNG seed (required)"},
      {"experiment.n", "n", "sample size or particle count"},
      {"experiment.reps", "reps", "number of replications"},
      {"experiment.dt", "dt", "Euler step (meanfield only; default 0.01)"},
      {"experiment.times", "times", "comma-separated observation times (meanfield)"},
      {"experiment.n_grid", "n-grid", "comma-separated increasing sample sizes"},
      {"experiment.quad_points", "quad-points", "Gauss-Legendre points in the remainder integral"},
      {"experiment.workers", "workers", "worker threads (0 = hardware concurrency)"},
      {"experiment.martingale_test", "martingale-test", "run the martingale increment test (decompose)", true},
      {"experiment.probes", "probes", "random (mu, nu) probes per functional (derivcheck)"},
      {"experiment.fd_step", "fd-step", "finite-difference step (derivcheck)"},
      {"experiment.richardson_levels", "richardson-levels", "Richardson levels (derivcheck)"},
      {"experiment.metric", "metric", "metric for the axiom suite, W:<l> with 0 < l < 1"},
      {"experiment.triples", "triples", "random triples for the axiom suite"},
      {"experiment.pairs", "pairs", "random pairs per order for the TV/W inequality"},
      {"experiment.coupling_pairs", "coupling-pairs", "random pairs for the quantile coupling check"},
      {"experiment.inequality_orders", "inequality-orders", "Wasserstein orders for the TV/W inequality"},
      {"experiment.analyses", "analyses", "meanfield analyses: fluctuation, residual, fourth-moment"},
      {"experiment.residual_times", "residual-times", "times for the master-equation residual"},
      {"experiment.residual_atoms", "residual-atoms", "atoms of the law proxy used as residual measure"},
      {"experiment.residual_measure", "residual-measure", "measure file used as residual measure"},
      {"experiment.residual_particles", "residual-particles", "inner particles for the residual"},
      {"experiment.fourth_moment_grid", "fourth-moment-grid", "N grid for the time-increment fourth moment"},
      {"experiment.fourth_moment_reps", "fourth-moment-reps", "replications per grid point"},
      {"experiment.fourth_moment_reference", "fourth-moment-reference", "reference particles for the limit"},
      {"experiment.assertions", "assertions", "true: failed checks give exit code 2"},
      {"experiment.ks_alpha", "ks-alpha", "KS / Wald significance level"},
      {"experiment.variance_tolerance", "variance-tolerance", "relative tolerance on the CLT variance"},
      {"experiment.identity_tolerance", "identity-tolerance", "tolerance on |dU - Q - R|"},
      {"experiment.slope_max", "slope-max", "largest accepted remainder slope"},
      {"experiment.r2_min", "r2-min", "smallest accepted r^2 of the remainder fit"},
      {"experiment.ratio_max", "ratio-max", "largest accepted max/min ratio of sqrt(N) E|dU|"},
      {"experiment.gap_tolerance", "gap-tolerance", "largest accepted derivative gap"},
      {"experiment.coupling_tolerance", "coupling-tolerance", "largest accepted coupling gap"},
      {"experiment.oracle_tolerance", "oracle-tolerance", "relative tolerance against the OU closed form"},
      {"experiment.moment_slope", "moment-slope", "expected slope of the fourth moment"},
      {"experiment.moment_slope_tolerance", "moment-slope-tolerance", "accepted deviation from that slope"},
      {"law.spec", "law", "normal:M,S | uniform:A,B | dirac:X | atoms:PATH, optional @dim"},
      {"model.name", "model", "registry model name"},
      {"model.kappa", "kappa", "mean-revert strength"},
      {"model.sigma", "sigma", "mean-revert diffusion"},
      {"model.force", "force", "run the limit covariance outside its declared hypotheses", true},
      {"model.reference_particles", "reference-particles", "particles of the limit reference cloud (0 = reps N clamped to [5000, 4e6] for the centering run)"},
      {"model.inner_particles", "inner-particles", "particles of each inner master-function cloud"},
      {"model.path_samples", "path-samples", "limit paths in the noise term"},
      {"model.quad_stride", "quad-stride", "time stride of the noise-term Riemann sum"},
      {"model.quadrature_points", "quadrature-points", "nodes of the initial-law quadrature"},
      {"model.eps", "eps", "mass of the perturbing atom"},
      {"model.h", "h-step", "spatial finite-difference step"},
      {"output.dir", "output-dir", "output directory (MFCLT_OUTPUT_DIR overrides the file value)"},
      {"output.report", "out", "JSON report file"},
      {"output.samples", "samples", "CSV samples file"},
      {"output.manifest", "manifest", "JSON manifest file"},
  };
  return keys;
}

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Clt;
  std::string functional;
  std::string law = "normal:0,1";
  std::string model;
  std::map<std::string, double> model_parameters;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  std::size_t reps = 0;
  // Set only for meanfield runs.
  std::optional<double> dt;
  std::vector<double> times;
  std::vector<std::size_t> n_grid;
  std::size_t quad_points = 8;
  unsigned workers = 0;
  bool martingale_test = false;

  std::size_t probes = 50;
  double fd_step = 1e-3;
  int richardson_levels = 2;

  std::string metric = "W:0.5";
  std::size_t triples = 200;
  std::size_t pairs = 1000;
  std::size_t coupling_pairs = 200;
  std::vector<double> inequality_orders = {0.5, 1.0, 2.0};

  std::vector<std::string> analyses = {"fluctuation"};
  std::vector<double> residual_times;
  std::size_t residual_atoms = 3;
  std::string residual_measure;
  std::size_t residual_particles = 10000;
  std::vector<std::size_t> fourth_moment_grid;
  std::size_t fourth_moment_reps = 800;
  std::size_t fourth_moment_reference = 20000;

  bool force = false;
  std::size_t reference_particles = 0;
  std::size_t inner_particles = 1000;
  std::size_t path_samples = 64;
  std::size_t quad_stride = 1;
  std::size_t quadrature_points = 24;
  double eps = 0.05;
  double h = 0.1;

  bool assertions = true;
  double ks_alpha = 0.01;
  double variance_tolerance = 0.10;
  double identity_tolerance = 1e-8;
  double slope_max = -0.5;
  double r2_min = 0.9;
  double ratio_max = 3.0;
  double gap_tolerance = 1e-6;
  double coupling_tolerance = 1e-9;
  double oracle_tolerance = 0.05;
  double moment_slope = -2.0;
  double moment_slope_tolerance = 0.3;

  std::string output_dir = ".";
  std::string report = "report.json";
  std::string samples = "samples.csv";
  std::string manifest = "manifest.json";

  bool has_analysis(const std::string& name) const {
    return std::find(analyses.begin(), analyses.end(), name) != analyses.end();
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Shortest round-trip text, used for config echoes.
inline std::string short_double(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::string body = trim(text);
  if (!body.empty() && (body.front() == '[' || body.front() == '{')) body = body.substr(1);
  if (!body.empty() && (body.back() == ']' || body.back() == '}')) body.pop_back();
  std::vector<std::string> out;
  std::string item;
  for (char c : body) {
    if (c == ',' || c == ' ' || c == '\t') {
      if (!item.empty()) out.push_back(item);
      item.clear();
    } else {
      item += c;
    }
  }
  if (!item.empty()) out.push_back(item);
  return out;
}

inline std::optional<double> to_double(const std::string& text) {
  const std::string t = trim(text);
  double x = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), x);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size() || !std::isfinite(x)) return std::nullopt;
  return x;
}

inline std::optional<std::uint64_t> to_unsigned(const std::string& text) {
  const std::string t = trim(text);
  std::uint64_t x = 0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), x);
  if (t.empty() || res.ec != std::errc() || res.ptr != t.data() + t.size()) return std::nullopt;
  return x;
}

inline std::optional<bool> to_bool(const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  return std::nullopt;
}

class ConfigReader {
 public:
  ConfigReader(const ConfigMap& map, std::vector<std::string>& problems) : map_(map), problems_(problems) {}

  bool has(const std::string& key) const { return map_.count(key) > 0; }

  std::optional<std::string> text(const std::string& key) const {
    const auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return trim(it->second);
  }

  void read(const std::string& key, std::string& out) const {
    if (auto t = text(key)) out = *t;
  }

  template <class T>
  void read_count(const std::string& key, T& out) const {
    if (auto t = text(key)) {
      if (auto v = to_unsigned(*t)) {
        out = static_cast<T>(*v);
      } else {
        problems_.push_back(key + ": expected a nonnegative integer, got '" + *t + "'");
      }
    }
  }

  void read(const std::string& key, double& out) const {
    if (auto t = text(key)) {
      if (auto v = to_double(*t)) {
        out = *v;
      } else {
        problems_.push_back(key + ": expected a finite number, got '" + *t + "'");
      }
    }
  }

  void read(const std::string& key, bool& out) const {
    if (auto t = text(key)) {
      if (auto v = to_bool(*t)) {
        out = *v;
      } else {
        problems_.push_back(key + ": expected true or false, got '" + *t + "'");
      }
    }
  }

  void read(const std::string& key, std::vector<double>& out) const {
    if (auto t = text(key)) {
      std::vector<double> values;
      for (const auto& item : split_list(*t)) {
        if (auto v = to_double(item)) {
          values.push_back(*v);
        } else {
          problems_.push_back(key + ": '" + item + "' is not a finite number");
          return;
        }
      }
      out = std::move(values);
    }
  }

  void read(const std::string& key, std::vector<std::size_t>& out) const {
    if (auto t = text(key)) {
      std::vector<std::size_t> values;
      for (const auto& item : split_list(*t)) {
        if (auto v = to_unsigned(item)) {
          values.push_back(static_cast<std::size_t>(*v));
        } else {
          problems_.push_back(key + ": '" + item + "' is not a nonnegative integer");
          return;
        }
      }
      out = std::move(values);
    }
  }

  void read(const std::string& key, std::vector<std::string>& out) const {
    if (auto t = text(key)) out = split_list(*t);
  }

 private:
  const ConfigMap& map_;
  std::vector<std::string>& problems_;
};

template <class T>
bool strictly_increasing(const std::vector<T>& xs) {
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (!(xs[i] > xs[i - 1])) return false;
  return true;
}

inline bool on_grid(double t, double dt) {
  const double k = std::round(t / dt);
  return std::abs(k * dt - t) <= 1e-9 * std::max(1.0, std::abs(t));
}

inline bool is_polynomial_functional(const std::string& name) {
  for (const auto& e : functional_registry())
    if (e.name == name) return e.polynomial_in_s;
  return false;
}

// Registry functionals as used by "all"; quantile levels stand in for the quantile family.
inline std::vector<std::string> all_functional_names(std::size_t dim) {
  std::vector<std::string> out;
  for (const auto& e : functional_registry()) {
    if (e.name.rfind("quantile:", 0) == 0) {
      if (dim == 1)
        for (const char* level : {"quantile:0.25", "quantile:0.5", "quantile:0.75"}) out.emplace_back(level);
    } else {
      out.push_back(e.name);
    }
  }
  return out;
}

inline bool ou_closed_form_applies(const ExperimentConfig& cfg, const SamplerSpec& law) {
  return cfg.model == "ou" && cfg.functional == "linear-x" && law.dim() == 1 &&
         (law.kind() == SamplerSpec::Kind::Normal || law.kind() == SamplerSpec::Kind::Uniform);
}

// Limit covariance of Linear(x) under dX = -X dt + dW with Var(X_0) = v0.
inline double ou_closed_form(double v0, double a, double b) {
  return std::exp(-(a + b)) * (v0 + (std::exp(2.0 * std::min(a, b)) - 1.0) / 2.0);
}

inline double law_variance(const SamplerSpec& law) {
  const auto p = law.parameters();
  if (law.kind() == SamplerSpec::Kind::Normal) return p[1] * p[1];
  return (p[1] - p[0]) * (p[1] - p[0]) / 12.0;
}

}  // namespace detail

// Reads an INI file with [experiment], [law], [model] and [output] sections.
inline ConfigMap load_config_file(const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError({std::string("cannot read config file: ") + e.what()});
  }
  ConfigMap out;
  std::vector<std::string> problems;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      problems.push_back("key '" + section + "' is outside a section");
      continue;
    }
    for (const auto& [key, value] : body) out[section + "." + key] = value.data();
  }
  if (!problems.empty()) throw ConfigError(problems);
  return out;
}

// Output directory override; the only environment variable consulted.
inline void apply_environment(ConfigMap& map) {
  if (const char* dir = std::getenv("MFCLT_OUTPUT_DIR"); dir && *dir) map["output.dir"] = dir;
}

// Validates a key/value map into a config. Every problem found is reported at once.
inline ExperimentConfig parse_config(const ConfigMap& map) {
  std::vector<std::string> problems;
  const detail::ConfigReader in(map, problems);
  ExperimentConfig cfg;

  std::set<std::string> known;
  for (const auto& k : config_keys()) known.insert(k.key);
  for (const auto& [key, value] : map)
    if (!known.count(key)) problems.push_back("unknown key '" + key + "'");

  const auto kind_text = in.text("experiment.kind");
  if (!kind_text) {
    problems.push_back("experiment.kind is required (clt, decompose, scaling, meanfield, derivcheck, metrics)");
  } else if (auto k = parse_kind(*kind_text)) {
    cfg.kind = *k;
  } else {
    problems.push_back("experiment.kind: unknown kind '" + *kind_text + "'");
  }
  const ExperimentKind kind = cfg.kind;
  const bool kind_ok = kind_text && parse_kind(*kind_text);

  if (auto s = in.text("experiment.seed")) {
    if (auto v = detail::to_unsigned(*s)) {
      cfg.seed = *v;
    } else {
      problems.push_back("experiment.seed: expected a nonnegative integer, got '" + *s + "'");
    }
  } else {
    problems.push_back("experiment.seed is required");
  }

  in.read("experiment.functional", cfg.functional);
  in.read("law.spec", cfg.law);
  in.read("model.name", cfg.model);
  for (const char* p : {"kappa", "sigma"}) {
    const std::string key = std::string("model.") + p;
    if (in.has(key)) {
      double v = 0.0;
      in.read(key, v);
      cfg.model_parameters[p] = v;
    }
  }
  in.read_count("experiment.n", cfg.n);
  in.read_count("experiment.reps", cfg.reps);
  if (kind == ExperimentKind::MeanField) {
    double dt = 0.01;
    in.read("experiment.dt", dt);
    cfg.dt = dt;
  }
  in.read("experiment.times", cfg.times);
  in.read("experiment.n_grid", cfg.n_grid);
  in.read_count("experiment.quad_points", cfg.quad_points);
  in.read_count("experiment.workers", cfg.workers);
  in.read("experiment.martingale_test", cfg.martingale_test);
  in.read_count("experiment.probes", cfg.probes);
  in.read("experiment.fd_step", cfg.fd_step);
  in.read_count("experiment.richardson_levels", cfg.richardson_levels);
  in.read("experiment.metric", cfg.metric);
  in.read_count("experiment.triples", cfg.triples);
  in.read_count("experiment.pairs", cfg.pairs);
  in.read_count("experiment.coupling_pairs", cfg.coupling_pairs);
  in.read("experiment.inequality_orders", cfg.inequality_orders);
  in.read("experiment.analyses", cfg.analyses);
  in.read("experiment.residual_times", cfg.residual_times);
  in.read_count("experiment.residual_atoms", cfg.residual_atoms);
  in.read("experiment.residual_measure", cfg.residual_measure);
  in.read_count("experiment.residual_particles", cfg.residual_particles);
  in.read("experiment.fourth_moment_grid", cfg.fourth_moment_grid);
  in.read_count("experiment.fourth_moment_reps", cfg.fourth_moment_reps);
  in.read_count("experiment.fourth_moment_reference", cfg.fourth_moment_reference);
  in.read("experiment.assertions", cfg.assertions);
  in.read("experiment.ks_alpha", cfg.ks_alpha);
  in.read("experiment.variance_tolerance", cfg.variance_tolerance);
  in.read("experiment.identity_tolerance", cfg.identity_tolerance);
  in.read("experiment.slope_max", cfg.slope_max);
  in.read("experiment.r2_min", cfg.r2_min);
  in.read("experiment.ratio_max", cfg.ratio_max);
  in.read("experiment.gap_tolerance", cfg.gap_tolerance);
  in.read("experiment.coupling_tolerance", cfg.coupling_tolerance);
  in.read("experiment.oracle_tolerance", cfg.oracle_tolerance);
  in.read("experiment.moment_slope", cfg.moment_slope);
  in.read("experiment.moment_slope_tolerance", cfg.moment_slope_tolerance);
  in.read("model.force", cfg.force);
  in.read_count("model.reference_particles", cfg.reference_particles);
  in.read_count("model.inner_particles", cfg.inner_particles);
  in.read_count("model.path_samples", cfg.path_samples);
  in.read_count("model.quad_stride", cfg.quad_stride);
  in.read_count("model.quadrature_points", cfg.quadrature_points);
  in.read("model.eps", cfg.eps);
  in.read("model.h", cfg.h);
  in.read("output.dir", cfg.output_dir);
  in.read("output.report", cfg.report);
  in.read("output.samples", cfg.samples);
  in.read("output.manifest", cfg.manifest);

  std::optional<SamplerSpec> law;
  try {
    law = SamplerSpec::parse(cfg.law);
  } catch (const std::exception& e) {
    problems.push_back(std::string("law.spec: ") + e.what());
  }

  auto require_positive = [&](const char* key, double value) {
    if (!(value > 0.0)) problems.push_back(std::string(key) + " must be positive");
  };
  auto check_functional = [&](bool allow_all) {
    if (cfg.functional.empty()) {
      problems.push_back("experiment.functional is required (registry: " + functional_registry_listing() + ")");
      return;
    }
    if (allow_all && cfg.functional == "all") return;
    if (!law) return;
    try {
      (void)make_functional(cfg.functional, *law);
    } catch (const std::exception& e) {
      problems.push_back(std::string("experiment.functional: ") + e.what());
    }
  };
  auto check_grid = [&](const char* key, const std::vector<std::size_t>& grid, std::size_t min_points, bool decade) {
    if (grid.size() < min_points) {
      problems.push_back(std::string(key) + " needs at least " + std::to_string(min_points) + " values");
      return;
    }
    if (std::find(grid.begin(), grid.end(), 0u) != grid.end()) problems.push_back(std::string(key) + " values must be positive");
    if (!detail::strictly_increasing(grid)) problems.push_back(std::string(key) + " must be strictly increasing");
    if (decade && grid.back() < 10 * grid.front()) problems.push_back(std::string(key) + " must span at least one decade");
  };

  require_positive("experiment.ks_alpha", cfg.ks_alpha);
  if (!(cfg.ks_alpha < 1.0)) problems.push_back("experiment.ks_alpha must be below 1");

  if (kind_ok) switch (kind) {
      case ExperimentKind::Clt:
        check_functional(false);
        if (cfg.n == 0) problems.push_back("experiment.n must be positive");
        if (cfg.reps < 100) problems.push_back("experiment.reps must be at least 100 for a CLT run");
        require_positive("experiment.variance_tolerance", cfg.variance_tolerance);
        break;
      case ExperimentKind::Decompose:
        check_functional(false);
        if (cfg.n == 0) problems.push_back("experiment.n must be positive");
        if (cfg.martingale_test && cfg.n < 8) problems.push_back("experiment.n must be at least 8 for the martingale test");
        if (cfg.reps == 0) problems.push_back("experiment.reps must be positive");
        if (cfg.quad_points == 0) problems.push_back("experiment.quad_points must be positive");
        require_positive("experiment.identity_tolerance", cfg.identity_tolerance);
        break;
      case ExperimentKind::Scaling:
        check_functional(false);
        check_grid("experiment.n_grid", cfg.n_grid, 4, true);
        if (cfg.reps < 2) problems.push_back("experiment.reps must be at least 2");
        if (cfg.quad_points == 0) problems.push_back("experiment.quad_points must be positive");
        require_positive("experiment.ratio_max", cfg.ratio_max);
        break;
      case ExperimentKind::MeanField: {
        check_functional(false);
        if (cfg.model.empty()) {
          problems.push_back("model.name is required (registry: " + model_registry_listing() + ")");
        } else if (law) {
          try {
            const MkvModel model = make_model(cfg.model, *law, cfg.model_parameters);
            (void)model;
          } catch (const std::exception& e) {
            problems.push_back(std::string("model.name: ") + e.what());
          }
        }
        const double dt = *cfg.dt;
        require_positive("experiment.dt", dt);
        static const std::vector<std::string> valid = {"fluctuation", "residual", "fourth-moment"};
        if (cfg.analyses.empty()) problems.push_back("experiment.analyses must name at least one analysis");
        for (const auto& a : cfg.analyses)
          if (std::find(valid.begin(), valid.end(), a) == valid.end())
            problems.push_back("experiment.analyses: unknown analysis '" + a + "' (expected fluctuation, residual, fourth-moment)");
        auto check_times = [&](const char* key, const std::vector<double>& ts, std::size_t max_points, bool allow_zero) {
          if (ts.empty()) {
            problems.push_back(std::string(key) + " must list at least one time");
            return;
          }
          if (ts.size() > max_points)
            problems.push_back(std::string(key) + " allows at most " + std::to_string(max_points) + " times");
          if (!detail::strictly_increasing(ts)) problems.push_back(std::string(key) + " must be strictly increasing");
          for (double t : ts) {
            if (t < 0.0 || (!allow_zero && t == 0.0))
              problems.push_back(std::string(key) + ": time " + detail::short_double(t) + " must be positive");
            else if (dt > 0.0 && !detail::on_grid(t, dt))
              problems.push_back(std::string(key) + ": time " + detail::short_double(t) + " is not on the dt grid");
          }
        };
        if (cfg.has_analysis("fluctuation")) {
          check_times("experiment.times", cfg.times, kMaxTimePoints, false);
          if (cfg.n < 2) problems.push_back("experiment.n must be at least 2 particles");
          if (cfg.reps < kKsMinSamples)
            problems.push_back("experiment.reps must be at least " + std::to_string(kKsMinSamples));
          if (cfg.path_samples == 0) problems.push_back("model.path_samples must be positive");
          if (cfg.quad_stride == 0) problems.push_back("model.quad_stride must be positive");
          if (cfg.quadrature_points == 0) problems.push_back("model.quadrature_points must be positive");
        }
        if (cfg.has_analysis("residual")) {
          check_times("experiment.residual_times", cfg.residual_times, 64, true);
          if (cfg.residual_measure.empty() && cfg.residual_atoms == 0)
            problems.push_back("experiment.residual_atoms must be positive");
          if (cfg.residual_particles == 0) problems.push_back("experiment.residual_particles must be positive");
        }
        if (cfg.has_analysis("fourth-moment")) {
          if (cfg.times.empty() || cfg.times.size() > 2) {
            problems.push_back("experiment.times must hold t2 or t1,t2 for the fourth moment");
          } else {
            check_times("experiment.times", cfg.times, 2, false);
          }
          check_grid("experiment.fourth_moment_grid", cfg.fourth_moment_grid, 3, false);
          if (cfg.fourth_moment_reps < 2) problems.push_back("experiment.fourth_moment_reps must be at least 2");
          if (cfg.fourth_moment_reference == 0) problems.push_back("experiment.fourth_moment_reference must be positive");
        }
        if (cfg.inner_particles == 0) problems.push_back("model.inner_particles must be positive");
        require_positive("model.eps", cfg.eps);
        if (!(cfg.eps < 0.25)) problems.push_back("model.eps must be below 0.25");
        require_positive("model.h", cfg.h);
        break;
      }
      case ExperimentKind::DerivCheck:
        if (cfg.functional.empty()) cfg.functional = "all";
        check_functional(true);
        if (cfg.probes == 0) problems.push_back("experiment.probes must be positive");
        require_positive("experiment.fd_step", cfg.fd_step);
        if (cfg.richardson_levels < 0 || cfg.richardson_levels > 8)
          problems.push_back("experiment.richardson_levels must lie in 0..8");
        require_positive("experiment.gap_tolerance", cfg.gap_tolerance);
        break;
      case ExperimentKind::Metrics:
        try {
          const MetricKind m = MetricKind::parse(cfg.metric);
          if (m.tag != MetricKind::Tag::WassersteinL || !(m.ell < 1.0))
            problems.push_back("experiment.metric must be W:<l> with 0 < l < 1 for the axiom suite");
        } catch (const std::exception& e) {
          problems.push_back(std::string("experiment.metric: ") + e.what());
        }
        if (cfg.triples == 0) problems.push_back("experiment.triples must be positive");
        if (cfg.pairs == 0) problems.push_back("experiment.pairs must be positive");
        if (cfg.coupling_pairs == 0) problems.push_back("experiment.coupling_pairs must be positive");
        if (cfg.inequality_orders.empty()) problems.push_back("experiment.inequality_orders must not be empty");
        for (double ell : cfg.inequality_orders)
          if (!(ell > 0.0)) problems.push_back("experiment.inequality_orders must be positive");
        break;
    }

  if (cfg.output_dir.empty()) problems.push_back("output.dir must not be empty");
  for (const auto* name : {&cfg.report, &cfg.samples, &cfg.manifest})
    if (name->empty()) problems.push_back("output file names must not be empty");

  if (!problems.empty()) throw ConfigError(problems);
  return cfg;
}

// Resolved settings relevant to the run's kind, in "section.key" form. Includes workers and
// output paths only when `full` is set, so reports do not depend on them.
inline std::vector<std::pair<std::string, std::string>> resolved_settings(const ExperimentConfig& cfg, bool full) {
  using detail::short_double;
  std::vector<std::pair<std::string, std::string>> out;
  auto add = [&](const std::string& key, const std::string& value) { out.emplace_back(key, value); };
  auto list = [](const auto& xs) {
    std::string s;
    for (const auto& x : xs) {
      if (!s.empty()) s += ",";
      if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>) {
        s += short_double(x);
      } else if constexpr (std::is_arithmetic_v<std::decay_t<decltype(x)>>) {
        s += std::to_string(x);
      } else {
        s += x;
      }
    }
    return s;
  };
  auto flag = [](bool b) { return std::string(b ? "true" : "false"); };
  add("experiment.kind", kind_name(cfg.kind));
  add("experiment.seed", std::to_string(cfg.seed));
  add("law.spec", cfg.law);
  switch (cfg.kind) {
    case ExperimentKind::Clt:
      add("experiment.functional", cfg.functional);
      add("experiment.n", std::to_string(cfg.n));
      add("experiment.reps", std::to_string(cfg.reps));
      add("experiment.ks_alpha", short_double(cfg.ks_alpha));
      add("experiment.variance_tolerance", short_double(cfg.variance_tolerance));
      break;
    case ExperimentKind::Decompose:
      add("experiment.functional", cfg.functional);
      add("experiment.n", std::to_string(cfg.n));
      add("experiment.reps", std::to_string(cfg.reps));
      add("experiment.quad_points", std::to_string(cfg.quad_points));
      add("experiment.martingale_test", flag(cfg.martingale_test));
      add("experiment.identity_tolerance", short_double(cfg.identity_tolerance));
      add("experiment.ks_alpha", short_double(cfg.ks_alpha));
      break;
    case ExperimentKind::Scaling:
      add("experiment.functional", cfg.functional);
      add("experiment.n_grid", list(cfg.n_grid));
      add("experiment.reps", std::to_string(cfg.reps));
      add("experiment.quad_points", std::to_string(cfg.quad_points));
      add("experiment.slope_max", short_double(cfg.slope_max));
      add("experiment.r2_min", short_double(cfg.r2_min));
      add("experiment.ratio_max", short_double(cfg.ratio_max));
      break;
    case ExperimentKind::MeanField:
      add("experiment.functional", cfg.functional);
      add("model.name", cfg.model);
      for (const auto& [k, v] : cfg.model_parameters) add("model." + k, short_double(v));
      add("experiment.dt", short_double(cfg.dt.value_or(0.01)));
      add("experiment.analyses", list(cfg.analyses));
      add("experiment.times", list(cfg.times));
      if (cfg.has_analysis("fluctuation")) {
        add("experiment.n", std::to_string(cfg.n));
        add("experiment.reps", std::to_string(cfg.reps));
        add("model.force", flag(cfg.force));
        add("model.reference_particles", std::to_string(cfg.reference_particles));
        add("model.path_samples", std::to_string(cfg.path_samples));
        add("model.quad_stride", std::to_string(cfg.quad_stride));
        add("model.quadrature_points", std::to_string(cfg.quadrature_points));
        add("experiment.ks_alpha", short_double(cfg.ks_alpha));
        add("experiment.oracle_tolerance", short_double(cfg.oracle_tolerance));
      }
      if (cfg.has_analysis("residual")) {
        add("experiment.residual_times", list(cfg.residual_times));
        if (cfg.residual_measure.empty()) {
          add("experiment.residual_atoms", std::to_string(cfg.residual_atoms));
        } else {
          add("experiment.residual_measure", cfg.residual_measure);
        }
        add("experiment.residual_particles", std::to_string(cfg.residual_particles));
      }
      if (cfg.has_analysis("fourth-moment")) {
        add("experiment.fourth_moment_grid", list(cfg.fourth_moment_grid));
        add("experiment.fourth_moment_reps", std::to_string(cfg.fourth_moment_reps));
        add("experiment.fourth_moment_reference", std::to_string(cfg.fourth_moment_reference));
        add("experiment.moment_slope", short_double(cfg.moment_slope));
        add("experiment.moment_slope_tolerance", short_double(cfg.moment_slope_tolerance));
      }
      add("model.inner_particles", std::to_string(cfg.inner_particles));
      add("model.eps", short_double(cfg.eps));
      add("model.h", short_double(cfg.h));
      break;
    case ExperimentKind::DerivCheck:
      add("experiment.functional", cfg.functional);
      add("experiment.probes", std::to_string(cfg.probes));
      add("experiment.fd_step", short_double(cfg.fd_step));
      add("experiment.richardson_levels", std::to_string(cfg.richardson_levels));
      add("experiment.gap_tolerance", short_double(cfg.gap_tolerance));
      break;
    case ExperimentKind::Metrics:
      add("experiment.metric", cfg.metric);
      add("experiment.triples", std::to_string(cfg.triples));
      add("experiment.pairs", std::to_string(cfg.pairs));
      add("experiment.coupling_pairs", std::to_string(cfg.coupling_pairs));
      add("experiment.inequality_orders", list(cfg.inequality_orders));
      add("experiment.coupling_tolerance", short_double(cfg.coupling_tolerance));
      break;
  }
  add("experiment.assertions", flag(cfg.assertions));
  if (full) {
    add("experiment.workers", std::to_string(cfg.workers));
    add("output.dir", cfg.output_dir);
    add("output.report", cfg.report);
    add("output.samples", cfg.samples);
    add("output.manifest", cfg.manifest);
  }
  return out;
}

// INI text that reproduces the run when passed back through --config.
inline std::string resolved_ini(const ExperimentConfig& cfg) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [key, value] : resolved_settings(cfg, true)) {
    const auto dot = key.find('.');
    sections[key.substr(0, dot)].emplace_back(key.substr(dot + 1), value);
  }
  std::string out;
  for (const char* name : {"experiment", "law", "model", "output"}) {
    const auto it = sections.find(name);
    if (it == sections.end()) continue;
    out += std::string(out.empty() ? "" : "\n") + "[" + name + "]\n";
    for (const auto& [k, v] : it->second) out += k + " = " + v + "\n";
  }
  return out;
}

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct RunOutcome {
  int exit_code = 0;
  std::string status;
  std::string reason_code;
  std::string reason;
  std::vector<CheckResult> checks;
  std::filesystem::path report_path;
  std::filesystem::path samples_path;
  std::filesystem::path manifest_path;
  std::filesystem::path config_path;
};

namespace detail {

struct RunArtifacts {
  JsonValue results = JsonValue::object();
  std::vector<CheckResult> checks;
  std::optional<std::string> csv;
};

inline std::string csv_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

inline JsonValue matrix_json(const Matrix& m) {
  JsonValue rows = JsonValue::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    JsonValue row = JsonValue::array();
    for (std::size_t j = 0; j < m.cols(); ++j) row.push(m(i, j));
    rows.push(std::move(row));
  }
  return rows;
}

inline JsonValue mean_estimates_json(const std::vector<MeanEstimate>& values) {
  JsonValue means = JsonValue::array(), errors = JsonValue::array();
  for (const auto& v : values) {
    means.push(v.mean);
    errors.push(v.std_error);
  }
  JsonValue out = JsonValue::object();
  out.set("mean", std::move(means));
  out.set("std_error", std::move(errors));
  return out;
}

inline RunArtifacts run_clt_kind(const ExperimentConfig& cfg) {
  const SamplerSpec law = SamplerSpec::parse(cfg.law);
  const Functional u = make_functional(cfg.functional, law);
  CltOptions options;
  options.workers = cfg.workers;
  const CltReport rep = run_clt_experiment(u, law, cfg.n, cfg.reps, cfg.seed, options);
  RunArtifacts out;
  auto& r = out.results;
  r.set("functional", cfg.functional);
  r.set("n", rep.n);
  r.set("reps", rep.replications);
  JsonValue ref = JsonValue::object();
  ref.set("value", rep.reference.value);
  ref.set("error", rep.reference.error);
  ref.set("method", rep.reference.method);
  ref.set("proxy_size", rep.reference.proxy_size);
  r.set("reference", std::move(ref));
  r.set("sigma2_theory", rep.sigma2_theory);
  r.set("sigma2_theory_se", rep.sigma2_theory_se);
  r.set("variance_method", rep.variance_method);
  r.set("sigma2_empirical", rep.sigma2_empirical);
  r.set("sigma2_empirical_se", rep.sigma2_empirical_se);
  r.set("sample_mean", rep.sample_mean);
  r.set("mean_abs_scaled", rep.mean_abs_scaled);
  r.set("mean_abs_scaled_se", rep.mean_abs_scaled_se);
  r.set("degenerate", rep.degenerate);
  r.set("ks_skipped", rep.ks_skipped);
  r.set("ks_stat", rep.ks_stat);
  r.set("ks_pvalue", rep.ks_pvalue);
  if (rep.degenerate) {
    out.checks.push_back({"degenerate_limit", rep.sigma2_theory < kDegeneracyThreshold,
                          "sigma2_theory " + fmt(rep.sigma2_theory) + "; KS skipped"});
  } else {
    out.checks.push_back({"ks_normality", rep.ks_pvalue > cfg.ks_alpha,
                          "p " + fmt(rep.ks_pvalue) + " vs alpha " + fmt(cfg.ks_alpha)});
    const double rel = std::abs(rep.sigma2_empirical / rep.sigma2_theory - 1.0);
    out.checks.push_back({"variance_match", rel <= cfg.variance_tolerance,
                          "empirical " + fmt(rep.sigma2_empirical) + " vs theory " + fmt(rep.sigma2_theory) +
                              " (relative gap " + fmt(rel) + ")"});
  }
  std::string csv = "replication,sample\n";
  for (std::size_t i = 0; i < rep.samples.size(); ++i) csv += std::to_string(i) + "," + csv_number(rep.samples[i]) + "\n";
  out.csv = std::move(csv);
  return out;
}

inline RunArtifacts run_decompose_kind(const ExperimentConfig& cfg) {
  const SamplerSpec law = SamplerSpec::parse(cfg.law);
  const Functional u = make_functional(cfg.functional, law);
  DecompositionOptions options;
  options.quad_points = cfg.quad_points;
  const Decomposer probe(u, law, options);
  const auto records = decompose_replications(u, law, cfg.n, cfg.reps, cfg.seed, options, cfg.workers);
  double max_identity = 0.0;
  std::vector<double> abs_q, abs_r;
  for (const auto& rec : records) {
    max_identity = std::max(max_identity, std::abs(rec.identity_residual));
    abs_q.push_back(std::abs(rec.q_n));
    abs_r.push_back(std::abs(rec.r_n));
  }
  const bool polynomial = is_polynomial_functional(cfg.functional);
  RunArtifacts out;
  auto& r = out.results;
  r.set("functional", cfg.functional);
  r.set("n", cfg.n);
  r.set("reps", cfg.reps);
  r.set("quad_points", cfg.quad_points);
  r.set("uses_moment_form", probe.uses_moment_form());
  r.set("polynomial_derivative", polynomial);
  r.set("max_identity_residual", max_identity);
  const auto mq = mean_with_error(abs_q), mr = mean_with_error(abs_r);
  r.set("mean_abs_q", mq.mean);
  r.set("mean_abs_q_se", mq.std_error);
  r.set("mean_abs_r", mr.mean);
  r.set("mean_abs_r_se", mr.std_error);
  if (polynomial) {
    out.checks.push_back({"decomposition_identity", max_identity < cfg.identity_tolerance,
                          "max |dU - Q - R| " + fmt(max_identity) + " vs " + fmt(cfg.identity_tolerance)});
  }
  if (cfg.martingale_test) {
    const WaldResult w = martingale_increment_test(u, law, cfg.n, cfg.reps, cfg.seed, options, cfg.workers);
    JsonValue m = JsonValue::object();
    m.set("statistic", w.statistic);
    m.set("p_value", w.p_value);
    m.set("observations", w.observations);
    m.set("coefficients", JsonValue::array_of(w.coefficients));
    r.set("martingale_test", std::move(m));
    out.checks.push_back({"martingale_increments", w.p_value > cfg.ks_alpha, "Wald p " + fmt(w.p_value)});
  }
  std::string csv = "replication,delta_u,q_n,r_n,identity_residual\n";
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    csv += std::to_string(i) + "," + csv_number(rec.delta_u) + "," + csv_number(rec.q_n) + "," + csv_number(rec.r_n) +
           "," + csv_number(rec.identity_residual) + "\n";
  }
  out.csv = std::move(csv);
  return out;
}

inline RunArtifacts run_scaling_kind(const ExperimentConfig& cfg) {
  const SamplerSpec law = SamplerSpec::parse(cfg.law);
  const Functional u = make_functional(cfg.functional, law);
  DecompositionOptions options;
  options.quad_points = cfg.quad_points;
  CltOptions clt;
  clt.workers = cfg.workers;
  const ScalingReport rem = remainder_scaling(u, law, cfg.n_grid, cfg.reps, cfg.seed, options, cfg.workers);
  const BoundednessReport l1 = sqrtn_l1_check(u, law, cfg.n_grid, cfg.reps, cfg.seed, clt);
  const BoundednessReport m4 = fourth_moment_scaled(u, law, cfg.n_grid, cfg.reps, cfg.seed, clt);
  RunArtifacts out;
  auto& r = out.results;
  r.set("functional", cfg.functional);
  r.set("n_grid", JsonValue::array_of(cfg.n_grid));
  r.set("reps", cfg.reps);
  JsonValue remainder = mean_estimates_json(rem.values);
  remainder.set("slope", rem.slope);
  remainder.set("r2", rem.r2);
  remainder.set("vanishing", rem.vanishing);
  r.set("remainder", std::move(remainder));
  JsonValue sqrtn = mean_estimates_json(l1.values);
  sqrtn.set("max_min_ratio", l1.max_min_ratio);
  r.set("sqrtn_l1", std::move(sqrtn));
  JsonValue fourth = mean_estimates_json(m4.values);
  fourth.set("max_min_ratio", m4.max_min_ratio);
  r.set("fourth_moment_scaled", std::move(fourth));
  out.checks.push_back({"remainder_slope", rem.vanishing || rem.slope <= cfg.slope_max,
                        rem.vanishing ? "remainder vanishes identically"
                                      : "slope " + fmt(rem.slope) + " vs max " + fmt(cfg.slope_max)});
  out.checks.push_back({"remainder_fit", rem.vanishing || rem.r2 > cfg.r2_min,
                        rem.vanishing ? "remainder vanishes identically" : "r2 " + fmt(rem.r2) + " vs min " + fmt(cfg.r2_min)});
  out.checks.push_back({"sqrtn_l1_bounded", l1.max_min_ratio < cfg.ratio_max,
                        "max/min ratio " + fmt(l1.max_min_ratio) + " vs " + fmt(cfg.ratio_max)});
  std::string csv =
      "n,mean_abs_remainder,mean_abs_remainder_se,sqrtn_l1,sqrtn_l1_se,fourth_moment_scaled,fourth_moment_scaled_se\n";
  for (std::size_t i = 0; i < cfg.n_grid.size(); ++i) {
    csv += std::to_string(cfg.n_grid[i]) + "," + csv_number(rem.values[i].mean) + "," + csv_number(rem.values[i].std_error) +
           "," + csv_number(l1.values[i].mean) + "," + csv_number(l1.values[i].std_error) + "," +
           csv_number(m4.values[i].mean) + "," + csv_number(m4.values[i].std_error) + "\n";
  }
  out.csv = std::move(csv);
  return out;
}

inline void run_fluctuation(const ExperimentConfig& cfg, const SamplerSpec& law, const MkvModel& model,
                            const Functional& phi, RunArtifacts& out) {
  const double dt = *cfg.dt;
  FluctuationOptions fo;
  fo.dt = dt;
  fo.reference_particles = cfg.reference_particles;
  fo.workers = cfg.workers;
  FluctuationReport fr = fluctuation_process(phi, model, cfg.n, cfg.times, cfg.reps, cfg.seed, fo);
  CovarianceConfig cc;
  cc.inner_particles = cfg.inner_particles;
  cc.dt = dt;
  cc.eps = cfg.eps;
  cc.h = cfg.h;
  if (cfg.reference_particles > 0) cc.reference_particles = cfg.reference_particles;
  cc.path_samples = cfg.path_samples;
  cc.quad_stride = cfg.quad_stride;
  cc.quadrature_points = cfg.quadrature_points;
  cc.force = cfg.force;
  cc.workers = cfg.workers;
  const CovarianceReport cov = theoretical_covariance(phi, model, cfg.times, cc, cfg.seed);
  fr.sigma_theory = cov.value;
  fr.sigma_theory_se = cov.std_error;
  const std::size_t k = cfg.times.size();
  fr.cramer_wold = cramer_wold_normality(fr.f_samples, cov.value, default_directions(k));

  JsonValue f = JsonValue::object();
  f.set("n", cfg.n);
  f.set("reps", cfg.reps);
  f.set("times", JsonValue::array_of(fr.times));
  f.set("hypotheses_declared", model.flags.is_dirac_initial || model.flags.claims_bounded_coeffs);
  f.set("forced", cfg.force);
  f.set("sigma_empirical", matrix_json(fr.sigma_empirical));
  f.set("sigma_empirical_se", matrix_json(fr.sigma_empirical_se));
  f.set("sigma_theory", matrix_json(cov.value));
  f.set("sigma_theory_se", matrix_json(cov.std_error));
  f.set("initial_term", matrix_json(cov.initial_term));
  f.set("noise_term", matrix_json(cov.noise_term));
  f.set("initial_method", cov.initial_method);
  JsonValue cw = JsonValue::array();
  for (const auto& t : fr.cramer_wold) {
    JsonValue d = JsonValue::object();
    d.set("direction", JsonValue::array_of(t.direction));
    d.set("variance", t.variance);
    d.set("statistic", t.statistic);
    d.set("p_value", t.p_value);
    d.set("skipped", t.skipped);
    cw.push(std::move(d));
  }
  f.set("cramer_wold", std::move(cw));
  f.set("reference_phi", JsonValue::array_of(fr.reference_phi));
  f.set("reference_bias", JsonValue::array_of(fr.reference_bias));
  f.set("reference_bias_scaled", JsonValue::array_of(fr.reference_bias_scaled));

  bool agree = true;
  double worst = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i; j < k; ++j) {
      const double se = std::hypot(fr.sigma_empirical_se(i, j), cov.std_error(i, j));
      const double gap = std::abs(fr.sigma_empirical(i, j) - cov.value(i, j));
      worst = std::max(worst, se > 0.0 ? gap / se : (gap > 0.0 ? std::numeric_limits<double>::infinity() : 0.0));
      agree = agree && gap <= 3.0 * se;
    }
  out.checks.push_back({"sigma_agreement", agree, "largest gap " + fmt(worst) + " combined SE (limit 3)"});
  bool cw_ok = true;
  std::size_t tested = 0;
  double min_p = 1.0;
  for (const auto& t : fr.cramer_wold) {
    if (t.skipped) continue;
    ++tested;
    min_p = std::min(min_p, t.p_value);
    cw_ok = cw_ok && t.p_value > cfg.ks_alpha;
  }
  out.checks.push_back({"cramer_wold", cw_ok,
                        std::to_string(tested) + " directions tested, smallest p " + fmt(min_p)});
  if (ou_closed_form_applies(cfg, law)) {
    const double v0 = law_variance(law);
    Matrix closed(k, k);
    bool ok = true;
    double worst_rel = 0.0;
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        closed(i, j) = ou_closed_form(v0, cfg.times[i], cfg.times[j]);
        const double gap = std::abs(cov.value(i, j) - closed(i, j));
        worst_rel = std::max(worst_rel, gap / std::abs(closed(i, j)));
        ok = ok && gap <= cfg.oracle_tolerance * std::abs(closed(i, j)) + cov.std_error(i, j);
      }
    f.set("closed_form", matrix_json(closed));
    out.checks.push_back({"closed_form_oracle", ok, "largest relative gap " + fmt(worst_rel)});
  }
  out.results.set("fluctuation", std::move(f));

  std::string csv = "replication";
  for (double t : cfg.times) csv += ",F_" + short_double(t);
  csv += "\n";
  for (std::size_t r = 0; r < fr.f_samples.rows(); ++r) {
    csv += std::to_string(r);
    for (std::size_t i = 0; i < k; ++i) csv += "," + csv_number(fr.f_samples(r, i));
    csv += "\n";
  }
  out.csv = std::move(csv);
}

inline void run_residual(const ExperimentConfig& cfg, const SamplerSpec& law, const MkvModel& model,
                         const Functional& phi, RunArtifacts& out) {
  const DiscreteMeasure mu = !cfg.residual_measure.empty() ? read_measure(cfg.residual_measure)
                             : law.is_discrete()           ? law.atoms()
                                                           : law.proxy(cfg.residual_atoms);
  MasterEvaluator ev{phi, model};
  ev.inner_particles = cfg.residual_particles;
  ev.dt = *cfg.dt;
  ev.eps = cfg.eps;
  ev.h = cfg.h;
  ev.richardson = true;
  ev.crn = true;
  ResidualOptions ro;
  ro.workers = cfg.workers;
  JsonValue rows = JsonValue::array();
  for (double t : cfg.residual_times) {
    const ResidualReport rep = master_equation_residual(ev, t, mu, cfg.seed, ro);
    JsonValue row = JsonValue::object();
    row.set("t", t);
    row.set("lhs", rep.lhs);
    row.set("rhs", rep.rhs);
    row.set("residual", rep.residual);
    row.set("std_error", rep.std_error);
    row.set("budget", rep.budget);
    row.set("within", rep.within);
    rows.push(std::move(row));
    out.checks.push_back({"residual_t=" + short_double(t), rep.within,
                          "|residual| " + fmt(std::abs(rep.residual)) + " vs budget " + fmt(rep.budget)});
  }
  JsonValue res = JsonValue::object();
  res.set("measure_atoms", mu.size());
  res.set("inner_particles", cfg.residual_particles);
  res.set("rows", std::move(rows));
  out.results.set("residual", std::move(res));
}

inline void run_fourth_moment(const ExperimentConfig& cfg, const MkvModel& model, const Functional& phi,
                              RunArtifacts& out) {
  const double t1 = cfg.times.size() == 2 ? cfg.times[0] : 0.0;
  const double t2 = cfg.times.back();
  FourthMomentOptions fo;
  fo.dt = *cfg.dt;
  fo.inner_particles = cfg.inner_particles;
  fo.reference_particles = cfg.fourth_moment_reference;
  fo.workers = cfg.workers;
  const IncrementMomentReport rep =
      time_increment_fourth_moment(phi, model, t1, t2, cfg.fourth_moment_grid, cfg.fourth_moment_reps, cfg.seed, fo);
  JsonValue m = mean_estimates_json(rep.values);
  m.set("t1", t1);
  m.set("t2", t2);
  m.set("n_grid", JsonValue::array_of(rep.n_grid));
  m.set("reps", cfg.fourth_moment_reps);
  m.set("slope", rep.slope);
  m.set("r2", rep.r2);
  out.results.set("fourth_moment", std::move(m));
  const double gap = std::abs(rep.slope - cfg.moment_slope);
  out.checks.push_back({"fourth_moment_slope", gap <= cfg.moment_slope_tolerance,
                        "slope " + fmt(rep.slope) + " vs " + fmt(cfg.moment_slope) + " +- " + fmt(cfg.moment_slope_tolerance)});
}

inline RunArtifacts run_meanfield_kind(const ExperimentConfig& cfg) {
  const SamplerSpec law = SamplerSpec::parse(cfg.law);
  const MkvModel model = make_model(cfg.model, law, cfg.model_parameters);
  const Functional phi = make_functional(cfg.functional, law);
  RunArtifacts out;
  out.results.set("functional", cfg.functional);
  out.results.set("model", cfg.model);
  out.results.set("dt", *cfg.dt);
  const ModelCheck mc = spot_check_model(model, 64, cfg.seed);
  JsonValue spot = JsonValue::object();
  spot.set("lipschitz_estimate", mc.lipschitz_estimate);
  spot.set("min_quadratic_form", mc.min_quadratic_form);
  spot.set("positive_semidefinite", mc.positive_semidefinite);
  out.results.set("model_check", std::move(spot));
  if (cfg.has_analysis("fluctuation")) run_fluctuation(cfg, law, model, phi, out);
  if (cfg.has_analysis("residual")) run_residual(cfg, law, model, phi, out);
  if (cfg.has_analysis("fourth-moment")) run_fourth_moment(cfg, model, phi, out);
  return out;
}

inline RunArtifacts run_derivcheck_kind(const ExperimentConfig& cfg) {
  const SamplerSpec law = SamplerSpec::parse(cfg.law);
  const std::vector<std::string> names =
      cfg.functional == "all" ? all_functional_names(law.dim()) : std::vector<std::string>{cfg.functional};
  RunArtifacts out;
  JsonValue rows = JsonValue::array();
  std::string csv = "functional,probes,max_relative_gap\n";
  for (const auto& name : names) {
    const Functional u = make_functional(name, law);
    const CrossCheckReport rep = derivative_crosscheck(u, cfg.probes, cfg.seed, cfg.fd_step, cfg.richardson_levels);
    JsonValue row = JsonValue::object();
    row.set("functional", name);
    row.set("probes", rep.probes);
    row.set("max_relative_gap", rep.max_relative_gap);
    rows.push(std::move(row));
    out.checks.push_back({"derivative_" + name, rep.max_relative_gap < cfg.gap_tolerance,
                          "gap " + fmt(rep.max_relative_gap) + " vs " + fmt(cfg.gap_tolerance)});
    csv += name + "," + std::to_string(rep.probes) + "," + csv_number(rep.max_relative_gap) + "\n";
  }
  out.results.set("functionals", std::move(rows));
  out.csv = std::move(csv);
  return out;
}

inline RunArtifacts run_metrics_kind(const ExperimentConfig& cfg) {
  const MetricKind metric = MetricKind::parse(cfg.metric);
  RunArtifacts out;
  RandomStream axiom_rng(cfg.seed, StreamTag::kMetricSuite, 0);
  const AxiomReport axioms = metric_axiom_suite(metric, axiom_rng, cfg.triples, 1e-10);
  JsonValue a = JsonValue::object();
  a.set("metric", metric.describe());
  a.set("triples", axioms.triples);
  a.set("symmetry_violations", axioms.symmetry_violations);
  a.set("identity_violations", axioms.identity_violations);
  a.set("triangle_violations", axioms.triangle_violations);
  out.results.set("axioms", std::move(a));
  out.checks.push_back({"metric_axioms", axioms.failed() == 0,
                        std::to_string(axioms.failed()) + " violations on " + std::to_string(axioms.triples) + " triples"});

  static const double orders[] = {1.0, 1.5, 2.0, 3.0};
  RandomStream pair_rng(cfg.seed, StreamTag::kMetricSuite, 1);
  std::string csv = "order,pair,quantile_coupling,transport_simplex,gap\n";
  double max_gap = 0.0;
  for (std::size_t p = 0; p < cfg.coupling_pairs; ++p) {
    const auto mu = random_small_measure(pair_rng, 6);
    const auto nu = random_small_measure(pair_rng, 6);
    for (double ell : orders) {
      const double coupled = std::pow(quantile_coupling_cost(mu, nu, ell), 1.0 / ell);
      const double simplex =
          std::pow(transport_cost(mu, nu, TransportOptions{}, [ell](double r) { return std::pow(r, ell); }), 1.0 / ell);
      const double gap = std::abs(coupled - simplex);
      max_gap = std::max(max_gap, gap);
      csv += short_double(ell) + "," + std::to_string(p) + "," + csv_number(coupled) + "," + csv_number(simplex) + "," +
             csv_number(gap) + "\n";
    }
  }
  JsonValue c = JsonValue::object();
  c.set("pairs", cfg.coupling_pairs);
  c.set("orders", JsonValue::array_of(std::vector<double>(std::begin(orders), std::end(orders))));
  c.set("max_gap", max_gap);
  out.results.set("quantile_coupling", std::move(c));
  out.checks.push_back({"quantile_coupling", max_gap < cfg.coupling_tolerance,
                        "max gap " + fmt(max_gap) + " vs " + fmt(cfg.coupling_tolerance)});

  RandomStream ineq_rng(cfg.seed, StreamTag::kMetricSuite, 2);
  JsonValue ineq = JsonValue::array();
  std::size_t total_violations = 0;
  for (double ell : cfg.inequality_orders) {
    std::size_t violations = 0;
    for (std::size_t p = 0; p < cfg.pairs; ++p) {
      const auto mu = random_small_measure(ineq_rng, 6);
      const auto nu = random_small_measure(ineq_rng, 6);
      if (!tv_wasserstein_inequality_check(mu, nu, ell)) ++violations;
    }
    total_violations += violations;
    JsonValue row = JsonValue::object();
    row.set("order", ell);
    row.set("pairs", cfg.pairs);
    row.set("violations", violations);
    ineq.push(std::move(row));
  }
  out.results.set("tv_wasserstein_inequality", std::move(ineq));
  out.checks.push_back({"tv_wasserstein_inequality", total_violations == 0,
                        std::to_string(total_violations) + " violations"});
  out.csv = std::move(csv);
  return out;
}

inline JsonValue checks_json(const std::vector<CheckResult>& checks) {
  JsonValue arr = JsonValue::array();
  for (const auto& c : checks) {
    JsonValue o = JsonValue::object();
    o.set("name", c.name);
    o.set("passed", c.passed);
    o.set("detail", c.detail);
    arr.push(std::move(o));
  }
  return arr;
}

inline JsonValue settings_json(const std::vector<std::pair<std::string, std::string>>& settings) {
  JsonValue o = JsonValue::object();
  for (const auto& [k, v] : settings) o.set(k, v);
  return o;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline std::filesystem::path output_path(const std::string& dir, const std::string& name) {
  const std::filesystem::path p(name);
  return p.is_absolute() ? p : std::filesystem::path(dir) / p;
}

}  // namespace detail

// Runs one experiment: writes the manifest (status "running"), the JSON report, the CSV
// samples and the resolved config, then finalizes the manifest. `command` is recorded verbatim.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const std::string& command = "") {
  using namespace detail;
  RunOutcome outcome;
  outcome.report_path = output_path(cfg.output_dir, cfg.report);
  outcome.samples_path = output_path(cfg.output_dir, cfg.samples);
  outcome.manifest_path = output_path(cfg.output_dir, cfg.manifest);
  outcome.config_path = output_path(cfg.output_dir, "resolved_config.ini");

  auto manifest = [&](const std::string& status, std::optional<double> wall, bool samples_written) {
    JsonValue m = JsonValue::object();
    m.set("artifact_version", kArtifactVersion);
    m.set("rng_algorithm", kRngAlgorithm);
    m.set("kind", kind_name(cfg.kind));
    m.set("status", status);
    m.set("exit_code", outcome.exit_code);
    m.set("reason_code", outcome.reason_code);
    m.set("reason", outcome.reason);
    m.set("command", command);
    m.set("reproduce", "mfclt run --config " + outcome.config_path.string());
    m.set("config", settings_json(resolved_settings(cfg, true)));
    m.set("checks", checks_json(outcome.checks));
    JsonValue outputs = JsonValue::object();
    outputs.set("report", outcome.report_path.string());
    if (samples_written) outputs.set("samples", outcome.samples_path.string());
    outputs.set("resolved_config", outcome.config_path.string());
    m.set("outputs", std::move(outputs));
    m.set("wall_time_seconds", wall ? JsonValue(*wall) : JsonValue(nullptr));
    write_text(outcome.manifest_path, m.dump());
  };

  try {
    std::filesystem::create_directories(cfg.output_dir);
    for (const auto& p : {outcome.report_path, outcome.samples_path, outcome.manifest_path})
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    write_text(outcome.config_path, resolved_ini(cfg));
    outcome.status = "running";
    manifest("running", std::nullopt, false);
  } catch (const std::exception& e) {
    outcome.exit_code = 3;
    outcome.status = "error";
    outcome.reason_code = "config-error";
    outcome.reason = std::string("cannot prepare output directory: ") + e.what();
    return outcome;
  }

  const auto start = std::chrono::steady_clock::now();
  RunArtifacts artifacts;
  try {
    switch (cfg.kind) {
      case ExperimentKind::Clt: artifacts = run_clt_kind(cfg); break;
      case ExperimentKind::Decompose: artifacts = run_decompose_kind(cfg); break;
      case ExperimentKind::Scaling: artifacts = run_scaling_kind(cfg); break;
      case ExperimentKind::MeanField: artifacts = run_meanfield_kind(cfg); break;
      case ExperimentKind::DerivCheck: artifacts = run_derivcheck_kind(cfg); break;
      case ExperimentKind::Metrics: artifacts = run_metrics_kind(cfg); break;
    }
    outcome.checks = artifacts.checks;
    std::string failed;
    for (const auto& c : outcome.checks)
      if (!c.passed) failed += (failed.empty() ? "" : ", ") + c.name;
    if (failed.empty() || !cfg.assertions) {
      outcome.exit_code = 0;
      outcome.status = failed.empty() ? "pass" : "fail";
      outcome.reason_code = failed.empty() ? "none" : "assertion-failure";
      outcome.reason = failed.empty() ? "" : "failed checks (not enforced): " + failed;
    } else {
      outcome.exit_code = 2;
      outcome.status = "fail";
      outcome.reason_code = "assertion-failure";
      outcome.reason = "failed checks: " + failed;
    }
  } catch (const HypothesisError& e) {
    outcome.exit_code = 3;
    outcome.status = "error";
    outcome.reason_code = "hypothesis-error";
    outcome.reason = e.what();
  } catch (const NumericError& e) {
    outcome.exit_code = 4;
    outcome.status = "error";
    outcome.reason_code = "numeric-failure";
    outcome.reason = e.what();
  } catch (const std::invalid_argument& e) {
    outcome.exit_code = 3;
    outcome.status = "error";
    outcome.reason_code = "config-error";
    outcome.reason = e.what();
  } catch (const std::exception& e) {
    outcome.exit_code = 4;
    outcome.status = "error";
    outcome.reason_code = "numeric-failure";
    outcome.reason = e.what();
  }
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  JsonValue report = JsonValue::object();
  report.set("artifact_version", kArtifactVersion);
  report.set("kind", kind_name(cfg.kind));
  report.set("rng_algorithm", kRngAlgorithm);
  report.set("seed", cfg.seed);
  report.set("config", settings_json(resolved_settings(cfg, false)));
  report.set("status", outcome.status);
  report.set("reason_code", outcome.reason_code);
  report.set("reason", outcome.reason);
  report.set("checks", checks_json(outcome.checks));
  report.set("results", std::move(artifacts.results));
  const bool samples = outcome.status != "error" && artifacts.csv.has_value();
  try {
    write_text(outcome.report_path, report.dump());
    if (samples) write_text(outcome.samples_path, *artifacts.csv);
    manifest(outcome.status, wall, samples);
  } catch (const std::exception& e) {
    outcome.exit_code = 4;
    outcome.status = "error";
    outcome.reason_code = "output-failure";
    outcome.reason = e.what();
  }
  return outcome;
}

}  // namespace mfclt
