#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mfclt/experiment.hpp"

namespace fs = std::filesystem;
using mfclt::ConfigError;
using mfclt::ConfigMap;
using mfclt::ExperimentKind;
using mfclt::parse_config;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("mfclt_test_experiment_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ConfigMap minimal_clt() {
  return {{"experiment.kind", "clt"},
          {"experiment.functional", "linear-square"},
          {"experiment.seed", "11"},
          {"experiment.n", "200"},
          {"experiment.reps", "200"}};
}

std::vector<std::string> problems_of(const ConfigMap& map) {
  try {
    parse_config(map);
  } catch (const ConfigError& e) {
    return e.problems();
  }
  return {};
}

bool mentions(const std::vector<std::string>& problems, const std::string& text) {
  for (const auto& p : problems)
    if (p.find(text) != std::string::npos) return true;
  return false;
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MFCLT_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(ParseConfig, MinimalCltFillsDefaults) {
  const auto cfg = parse_config(minimal_clt());
  EXPECT_EQ(cfg.kind, ExperimentKind::Clt);
  EXPECT_EQ(cfg.quad_points, 8u);
  EXPECT_FALSE(cfg.dt.has_value());
  EXPECT_EQ(cfg.law, "normal:0,1");
  EXPECT_EQ(cfg.seed, 11u);
  EXPECT_TRUE(cfg.assertions);
  EXPECT_DOUBLE_EQ(cfg.ks_alpha, 0.01);
  EXPECT_DOUBLE_EQ(cfg.variance_tolerance, 0.10);
}

TEST(ParseConfig, SeedIsRequired) {
  auto map = minimal_clt();
  map.erase("experiment.seed");
  EXPECT_TRUE(mentions(problems_of(map), "experiment.seed is required"));
}

TEST(ParseConfig, UnsortedGridIsRejected) {
  ConfigMap map = {{"experiment.kind", "scaling"}, {"experiment.functional", "mean-square"}, {"experiment.seed", "1"},
                   {"experiment.reps", "10"},      {"experiment.n_grid", "100,3162,316,1000"}};
  EXPECT_TRUE(mentions(problems_of(map), "strictly increasing"));
  map["experiment.n_grid"] = "100,316,1000,3162";
  EXPECT_EQ(parse_config(map).n_grid, (std::vector<std::size_t>{100, 316, 1000, 3162}));
}

TEST(ParseConfig, QuantileFunctionalName) {
  auto map = minimal_clt();
  map["experiment.functional"] = "quantile:0.5";
  const auto cfg = parse_config(map);
  const auto u = mfclt::make_functional(cfg.functional, mfclt::SamplerSpec::parse(cfg.law));
  ASSERT_NE(u.quantile_spec(), nullptr);
  EXPECT_DOUBLE_EQ(u.quantile_spec()->level, 0.5);
}

TEST(ParseConfig, UnknownNamesListTheRegistry) {
  auto map = minimal_clt();
  map["experiment.functional"] = "no-such-functional";
  const auto problems = problems_of(map);
  EXPECT_TRUE(mentions(problems, "cube-of-second-moment"));
  EXPECT_TRUE(mentions(problems, "quantile:<v>"));

  ConfigMap mf = {{"experiment.kind", "meanfield"}, {"experiment.functional", "linear-x"}, {"experiment.seed", "1"},
                  {"experiment.n", "50"},           {"experiment.reps", "50"},            {"experiment.times", "0.5"},
                  {"model.name", "vasicek"}};
  const auto mf_problems = problems_of(mf);
  EXPECT_TRUE(mentions(mf_problems, "mean-revert"));
  EXPECT_TRUE(mentions(mf_problems, "bounded-sine"));
}

TEST(ParseConfig, ProblemsAreItemized) {
  ConfigMap map = {{"experiment.kind", "clt"},  {"experiment.functional", "linear-x"}, {"experiment.n", "0"},
                   {"experiment.reps", "5"},    {"experiment.bogus", "1"},            {"law.spec", "cauchy:0,1"}};
  const auto problems = problems_of(map);
  EXPECT_TRUE(mentions(problems, "seed is required"));
  EXPECT_TRUE(mentions(problems, "experiment.n must be positive"));
  EXPECT_TRUE(mentions(problems, "at least 100"));
  EXPECT_TRUE(mentions(problems, "unknown key 'experiment.bogus'"));
  EXPECT_TRUE(mentions(problems, "law.spec"));
  EXPECT_GE(problems.size(), 5u);
}

TEST(ParseConfig, BadNumbersAreReported) {
  auto map = minimal_clt();
  map["experiment.n"] = "-3";
  map["experiment.ks_alpha"] = "abc";
  const auto problems = problems_of(map);
  EXPECT_TRUE(mentions(problems, "experiment.n: expected a nonnegative integer"));
  EXPECT_TRUE(mentions(problems, "experiment.ks_alpha: expected a finite number"));
}

TEST(ParseConfig, MeanFieldDefaultsAndTimeGrid) {
  ConfigMap map = {{"experiment.kind", "meanfield"}, {"experiment.functional", "linear-x"}, {"experiment.seed", "1"},
                   {"experiment.n", "50"},           {"experiment.reps", "50"},            {"experiment.times", "0.5, 1"},
                   {"model.name", "ou"},             {"model.force", "true"}};
  const auto cfg = parse_config(map);
  ASSERT_TRUE(cfg.dt.has_value());
  EXPECT_DOUBLE_EQ(*cfg.dt, 0.01);
  EXPECT_EQ(cfg.times, (std::vector<double>{0.5, 1.0}));
  EXPECT_TRUE(cfg.force);
  map["experiment.times"] = "0.5,0.505";
  EXPECT_TRUE(mentions(problems_of(map), "not on the dt grid"));
  map["experiment.times"] = "1.0,0.5";
  EXPECT_TRUE(mentions(problems_of(map), "strictly increasing"));
  map["experiment.times"] = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
  EXPECT_TRUE(mentions(problems_of(map), "at most 8"));
}

TEST(ParseConfig, DtIsIgnoredOutsideMeanField) {
  auto map = minimal_clt();
  map["experiment.dt"] = "0.1";
  EXPECT_FALSE(parse_config(map).dt.has_value());
}

TEST(ParseConfig, ModelParametersAreChecked) {
  ConfigMap map = {{"experiment.kind", "meanfield"}, {"experiment.functional", "linear-x"}, {"experiment.seed", "1"},
                   {"experiment.n", "50"},           {"experiment.reps", "50"},            {"experiment.times", "0.5"},
                   {"model.name", "ou"},             {"model.kappa", "2"}};
  EXPECT_TRUE(mentions(problems_of(map), "has no parameter 'kappa'"));
  map["model.name"] = "mean-revert";
  EXPECT_EQ(parse_config(map).model_parameters.at("kappa"), 2.0);
}

TEST(ConfigFile, IniSectionsBecomeKeys) {
  const auto dir = scratch("ini");
  const auto path = dir / "run.ini";
  std::ofstream(path) << "[experiment]\nkind = clt\nfunctional = quantile:0.5\nseed = 7\nn = 100\nreps = 100\n"
                         "[law]\nspec = uniform:0,2\n[output]\ndir = out\n";
  const auto map = mfclt::load_config_file(path.string());
  EXPECT_EQ(map.at("experiment.functional"), "quantile:0.5");
  EXPECT_EQ(map.at("law.spec"), "uniform:0,2");
  const auto cfg = parse_config(map);
  EXPECT_EQ(cfg.output_dir, "out");
  EXPECT_THROW(mfclt::load_config_file((dir / "missing.ini").string()), ConfigError);
}

TEST(ConfigFile, ResolvedIniReproducesSettings) {
  auto map = minimal_clt();
  map["law.spec"] = "uniform:-1,1";
  const auto cfg = parse_config(map);
  const auto dir = scratch("resolved");
  const auto path = dir / "resolved.ini";
  std::ofstream(path) << mfclt::resolved_ini(cfg);
  const auto again = parse_config(mfclt::load_config_file(path.string()));
  EXPECT_EQ(mfclt::resolved_settings(again, true), mfclt::resolved_settings(cfg, true));
}

TEST(Json, SeventeenDigitsAndNull) {
  mfclt::JsonValue v = mfclt::JsonValue::object();
  v.set("x", 0.1);
  v.set("inf", std::numeric_limits<double>::infinity());
  v.set("seed", std::uint64_t{18446744073709551615ull});
  v.set("list", mfclt::JsonValue::array_of(std::vector<double>{1.0, 2.5}));
  const std::string text = v.dump();
  EXPECT_NE(text.find("0.10000000000000001"), std::string::npos);
  const auto parsed = nlohmann::json::parse(text);
  EXPECT_TRUE(parsed["inf"].is_null());
  EXPECT_EQ(parsed["seed"].get<std::uint64_t>(), 18446744073709551615ull);
  EXPECT_EQ(parsed["list"][1].get<double>(), 2.5);
  EXPECT_EQ(parsed["x"].get<double>(), 0.1);
}

TEST(Run, CltWritesArtifactsAndIsReproducible) {
  const auto dir = scratch("clt");
  auto map = minimal_clt();
  map["output.dir"] = (dir / "a").string();
  map["experiment.workers"] = "1";
  const auto a = mfclt::run_experiment(parse_config(map));
  map["output.dir"] = (dir / "b").string();
  map["experiment.workers"] = "4";
  const auto b = mfclt::run_experiment(parse_config(map));
  ASSERT_EQ(a.exit_code, 0) << a.reason;
  ASSERT_EQ(b.exit_code, 0) << b.reason;
  EXPECT_EQ(slurp(a.report_path), slurp(b.report_path));
  EXPECT_EQ(slurp(a.samples_path), slurp(b.samples_path));

  const auto report = read_json(a.report_path);
  EXPECT_EQ(report["status"], "pass");
  EXPECT_EQ(report["rng_algorithm"], "philox4x32-10");
  const double se = report["results"]["sigma2_theory_se"];
  EXPECT_NEAR(report["results"]["sigma2_theory"].get<double>(), 2.0, 4.0 * se);
  EXPECT_FALSE(report["config"].contains("experiment.workers"));

  const auto manifest = read_json(a.manifest_path);
  EXPECT_EQ(manifest["status"], "pass");
  EXPECT_EQ(manifest["exit_code"], 0);
  EXPECT_EQ(manifest["config"]["experiment.workers"], "1");
  EXPECT_TRUE(manifest["wall_time_seconds"].is_number());
  EXPECT_EQ(manifest["checks"].size(), 2u);
  EXPECT_TRUE(fs::exists(a.config_path));

  const std::string csv = slurp(a.samples_path);
  EXPECT_EQ(csv.rfind("replication,sample\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 201);
}

TEST(Run, FailedAssertionGivesExitTwo) {
  const auto dir = scratch("fail");
  auto map = minimal_clt();
  map["output.dir"] = dir.string();
  map["experiment.variance_tolerance"] = "1e-9";
  const auto out = mfclt::run_experiment(parse_config(map));
  EXPECT_EQ(out.exit_code, 2);
  EXPECT_EQ(out.reason_code, "assertion-failure");
  EXPECT_EQ(read_json(out.manifest_path)["status"], "fail");

  map["experiment.assertions"] = "false";
  const auto lenient = mfclt::run_experiment(parse_config(map));
  EXPECT_EQ(lenient.exit_code, 0);
  EXPECT_EQ(lenient.status, "fail");
}

TEST(Run, HypothesisGateGivesExitThree) {
  const auto dir = scratch("gate");
  ConfigMap map = {{"experiment.kind", "meanfield"}, {"experiment.functional", "linear-x"}, {"experiment.seed", "1"},
                   {"experiment.n", "20"},           {"experiment.reps", "20"},            {"experiment.times", "0.1"},
                   {"experiment.dt", "0.05"},        {"model.name", "ou"},                 {"model.reference_particles", "50"},
                   {"output.dir", dir.string()}};
  const auto out = mfclt::run_experiment(parse_config(map));
  EXPECT_EQ(out.exit_code, 3);
  EXPECT_EQ(out.reason_code, "hypothesis-error");
  const auto manifest = read_json(out.manifest_path);
  EXPECT_EQ(manifest["status"], "error");
  EXPECT_EQ(manifest["reason_code"], "hypothesis-error");
  EXPECT_FALSE(fs::exists(out.samples_path));
}

TEST(Run, DivergentParticlesGiveExitFour) {
  const auto dir = scratch("numeric");
  ConfigMap map = {{"experiment.kind", "meanfield"}, {"experiment.functional", "linear-x"}, {"experiment.seed", "1"},
                   {"experiment.n", "20"},           {"experiment.reps", "20"},            {"experiment.times", "1"},
                   {"model.name", "mean-revert"},    {"model.kappa", "1e6"},               {"output.dir", dir.string()}};
  const auto out = mfclt::run_experiment(parse_config(map));
  EXPECT_EQ(out.exit_code, 4);
  EXPECT_EQ(out.reason_code, "numeric-failure");
  EXPECT_NE(out.reason.find("non-finite"), std::string::npos);
}

TEST(Run, DerivCheckAndMetrics) {
  const auto dir = scratch("derivmetrics");
  ConfigMap deriv = {{"experiment.kind", "derivcheck"}, {"experiment.seed", "3"}, {"experiment.probes", "5"},
                     {"output.dir", (dir / "d").string()}};
  const auto d = mfclt::run_experiment(parse_config(deriv));
  EXPECT_EQ(d.exit_code, 0) << d.reason;
  EXPECT_EQ(read_json(d.report_path)["results"]["functionals"].size(), mfclt::detail::all_functional_names(1).size());

  ConfigMap metrics = {{"experiment.kind", "metrics"}, {"experiment.seed", "3"},     {"experiment.triples", "20"},
                       {"experiment.pairs", "50"},     {"experiment.coupling_pairs", "20"},
                       {"output.dir", (dir / "m").string()}};
  const auto m = mfclt::run_experiment(parse_config(metrics));
  EXPECT_EQ(m.exit_code, 0) << m.reason;
  EXPECT_EQ(m.checks.size(), 3u);
}

TEST(Run, DecomposeAndScaling) {
  const auto dir = scratch("decompose");
  ConfigMap dec = {{"experiment.kind", "decompose"}, {"experiment.functional", "mean-square"}, {"experiment.seed", "5"},
                   {"experiment.n", "50"},           {"experiment.reps", "20"},               {"experiment.martingale_test", "true"},
                   {"output.dir", (dir / "d").string()}};
  const auto d = mfclt::run_experiment(parse_config(dec));
  EXPECT_EQ(d.exit_code, 0) << d.reason;
  const auto report = read_json(d.report_path);
  EXPECT_LT(report["results"]["max_identity_residual"].get<double>(), 1e-8);
  EXPECT_TRUE(report["results"].contains("martingale_test"));

  ConfigMap sc = {{"experiment.kind", "scaling"}, {"experiment.functional", "linear-x"}, {"experiment.seed", "5"},
                  {"experiment.n_grid", "10,20,40,100"}, {"experiment.reps", "20"}, {"output.dir", (dir / "s").string()}};
  const auto s = mfclt::run_experiment(parse_config(sc));
  const auto sr = read_json(s.report_path);
  EXPECT_TRUE(sr["results"]["remainder"]["vanishing"].get<bool>());
  EXPECT_TRUE(sr["results"]["remainder"]["slope"].is_null());
}

TEST(Cli, RunsAndMapsErrors) {
  const auto dir = scratch("cli");
  const std::string common = " --functional linear-square --n 100 --reps 100 --seed 9 --workers 2";
  EXPECT_EQ(run_cli("clt run" + common + " --output-dir " + (dir / "ok").string(), dir / "ok.log"), 0)
      << slurp(dir / "ok.log");
  EXPECT_TRUE(fs::exists(dir / "ok" / "report.json"));
  EXPECT_NE(slurp(dir / "ok.log").find("[PASS] ks_normality"), std::string::npos);

  EXPECT_EQ(run_cli("clt run --functional nope --n 100 --reps 100 --seed 9", dir / "bad.log"), 3);
  EXPECT_NE(slurp(dir / "bad.log").find("linear-square"), std::string::npos);

  EXPECT_EQ(run_cli("clt run --functional linear-x --n 100 --reps 100", dir / "noseed.log"), 3);
  EXPECT_EQ(run_cli("clt frobnicate", dir / "badsub.log"), 3);
  EXPECT_EQ(run_cli("list", dir / "list.log"), 0);
  EXPECT_NE(slurp(dir / "list.log").find("bounded-sine"), std::string::npos);
}

TEST(Cli, ConfigFileFlagsAndEnvironment) {
  const auto dir = scratch("cli_config");
  const auto ini = dir / "run.ini";
  std::ofstream(ini) << "[experiment]\nkind = clt\nfunctional = linear-square\nseed = 4\nn = 100\nreps = 100\n"
                        "[output]\ndir = " << (dir / "from_file").string() << "\n";
  // The environment overrides the file's output directory; --out renames the report.
  const std::string env = "MFCLT_OUTPUT_DIR=" + (dir / "from_env").string() + " ";
  const std::string cmd = env + std::string(MFCLT_CLI_PATH) + " clt run --config " + ini.string() +
                          " --reps 120 --out fluct.json > " + (dir / "log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0) << slurp(dir / "log");
  ASSERT_TRUE(fs::exists(dir / "from_env" / "fluct.json"));
  EXPECT_FALSE(fs::exists(dir / "from_file"));
  const auto report = read_json(dir / "from_env" / "fluct.json");
  EXPECT_EQ(report["results"]["reps"], 120);

  // Re-running the resolved config reproduces the report byte for byte.
  const std::string again = std::string(MFCLT_CLI_PATH) + " run --config " + (dir / "from_env" / "resolved_config.ini").string() +
                            " --output-dir " + (dir / "again").string() + " > /dev/null 2>&1";
  ASSERT_EQ(std::system(again.c_str()), 0);
  EXPECT_EQ(slurp(dir / "again" / "fluct.json"), slurp(dir / "from_env" / "fluct.json"));
}
