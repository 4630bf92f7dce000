#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mfclt/experiment.hpp"

namespace {

struct LeafOptions {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
};

void add_experiment_options(CLI::App* app, LeafOptions& opts) {
  app->add_option("--config", opts.config_file, "INI config file")->check(CLI::ExistingFile);
  app->add_option("--set", opts.sets, "override any key: section.key=value (repeatable)");
  for (const auto& key : mfclt::config_keys()) {
    if (std::string(key.key) == "experiment.kind") continue;
    const std::string flag = std::string("--") + key.flag;
    if (key.is_switch) {
      app->add_flag(flag, opts.switches[key.key], key.help);
    } else {
      app->add_option(flag, opts.values[key.key], key.help);
    }
  }
}

mfclt::ConfigMap build_map(const CLI::App* leaf, const LeafOptions& opts, const std::string& kind) {
  mfclt::ConfigMap map;
  if (!opts.config_file.empty()) map = mfclt::load_config_file(opts.config_file);
  mfclt::apply_environment(map);
  for (const auto& key : mfclt::config_keys()) {
    if (std::string(key.key) == "experiment.kind") continue;
    const std::string flag = std::string("--") + key.flag;
    if (leaf->count(flag) == 0) continue;
    map[key.key] = key.is_switch ? "true" : opts.values.at(key.key);
  }
  std::vector<std::string> problems;
  for (const auto& item : opts.sets) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || item.find('.') > eq) {
      problems.push_back("--set expects section.key=value, got '" + item + "'");
      continue;
    }
    map[mfclt::detail::trim(item.substr(0, eq))] = item.substr(eq + 1);
  }
  if (!problems.empty()) throw mfclt::ConfigError(problems);
  if (!kind.empty()) map["experiment.kind"] = kind;
  return map;
}

int execute(const CLI::App* leaf, const LeafOptions& opts, const std::string& kind, const std::string& command) {
  mfclt::ExperimentConfig cfg;
  try {
    cfg = mfclt::parse_config(build_map(leaf, opts, kind));
  } catch (const mfclt::ConfigError& e) {
    std::cerr << "config error:\n";
    for (const auto& p : e.problems()) std::cerr << "  - " << p << "\n";
    return 3;
  }
  const mfclt::RunOutcome out = mfclt::run_experiment(cfg, command);
  for (const auto& c : out.checks) std::cout << (c.passed ? "[PASS] " : "[FAIL] ") << c.name << ": " << c.detail << "\n";
  std::cout << "status: " << out.status;
  if (!out.reason.empty()) std::cout << " (" << out.reason_code << ": " << out.reason << ")";
  std::cout << "\nreport: " << out.report_path.string() << "\nmanifest: " << out.manifest_path.string() << "\n";
  if (out.status == "error") std::cerr << out.reason_code << ": " << out.reason << "\n";
  return out.exit_code;
}

void print_registries() {
  std::cout << "functionals:\n";
  for (const auto& e : mfclt::functional_registry()) std::cout << "  " << e.name << "  " << e.summary << "\n";
  std::cout << "models:\n";
  for (const auto& e : mfclt::model_registry()) {
    std::cout << "  " << e.name << "  " << e.summary;
    if (!e.parameters.empty()) {
      std::cout << " [";
      for (std::size_t i = 0; i < e.parameters.size(); ++i) std::cout << (i ? ", " : "") << e.parameters[i];
      std::cout << "]";
    }
    std::cout << "\n";
  }
  std::cout << "laws:\n  normal:M,S  uniform:A,B  dirac:X  atoms:PATH  (append @d for dimension d)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Central limit experiments for measure functionals and mean-field particle systems"};
  app.require_subcommand(1);

  struct Leaf {
    CLI::App* app;
    std::string kind;
    LeafOptions opts;
  };
  std::vector<Leaf> leaves;
  leaves.reserve(8);
  auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help, const std::string& kind) {
    leaves.push_back({parent->add_subcommand(name, help), kind, {}});
    add_experiment_options(leaves.back().app, leaves.back().opts);
  };

  auto* clt = app.add_subcommand("clt", "empirical-measure CLT experiments");
  clt->require_subcommand(1);
  leaf(clt, "run", "replicate sqrt(N)(U(m^N) - U(m0)) and test it against the limit normal law", "clt");
  leaf(clt, "decompose", "check dU = Q_N + R_N and the martingale increments", "decompose");
  leaf(clt, "scaling", "fit the decay of E|R_N| and the sqrt(N) L1 bound over an N grid", "scaling");
  auto* mf = app.add_subcommand("meanfield", "mean-field particle fluctuations");
  mf->require_subcommand(1);
  leaf(mf, "run", "fluctuation covariance, master-equation residual, time-increment moments", "meanfield");
  leaf(&app, "derivcheck", "symbolic vs finite-difference derivative cross-check", "derivcheck");
  auto* metrics = app.add_subcommand("metrics", "metric checks on random discrete measures");
  metrics->require_subcommand(1);
  leaf(metrics, "check", "axioms, quantile coupling and the TV/W inequality", "metrics");
  leaf(&app, "run", "run a config file; the kind comes from [experiment] kind", "");
  app.add_subcommand("list", "print the functional, model and law registries")->callback(print_registries);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 3;
  }

  std::string command;
  for (int i = 0; i < argc; ++i) command += (i ? " " : "") + std::string(argv[i]);
  for (auto& l : leaves) {
    if (!l.app->parsed()) continue;
    try {
      return execute(l.app, l.opts, l.kind, command);
    } catch (const mfclt::ConfigError& e) {
      std::cerr << "config error:\n";
      for (const auto& p : e.problems()) std::cerr << "  - " << p << "\n";
      return 3;
    }
  }
  return 0;
}
