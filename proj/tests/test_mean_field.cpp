#include <gtest/gtest.h>

#include <cmath>
#include <string>
#include <vector>

#include "mfclt/mean_field.hpp"
#include "mfclt/registry.hpp"

namespace {

using mfclt::DiscreteMeasure;
using mfclt::Functional;
using mfclt::MkvModel;
using mfclt::SamplerSpec;

double first(std::span<const double> x) { return x[0]; }

Functional linear_x() { return Functional::linear(1, first, "linear-x"); }

Functional mean_square() {
  return Functional::smooth_of_linear(
      1, mfclt::OuterFunction::univariate([](double t) { return t * t; }, {[](double t) { return 2.0 * t; }, [](double) { return 2.0; }}),
      {first}, "mean-square");
}

// b = 0, sigma = 0.
MkvModel frozen_model(SamplerSpec initial) {
  return mfclt::pointwise_model(
      "frozen", 1, 1, [](auto, const DiscreteMeasure&, std::span<double> out) { out[0] = 0.0; },
      [](auto, const DiscreteMeasure&, std::span<double> out) { out[0] = 0.0; }, std::move(initial), true);
}

// b = -x, sigma = 0.
MkvModel decay_model(SamplerSpec initial) {
  return mfclt::pointwise_model(
      "decay", 1, 1, [](std::span<const double> x, const DiscreteMeasure&, std::span<double> out) { out[0] = -x[0]; },
      [](auto, const DiscreteMeasure&, std::span<double> out) { out[0] = 0.0; }, std::move(initial), true);
}

DiscreteMeasure three_atoms() { return DiscreteMeasure(1, {-1.0, 0.5, 2.0}, {0.3, 0.5, 0.2}); }

double mean_of(const DiscreteMeasure& mu) { return mu.integrate(first); }

// Discrete-time decay factor of the Euler scheme for b = -x.
double euler_decay(double t, double dt) { return std::pow(1.0 - dt, std::round(t / dt)); }

TEST(GaussHermite, ReproducesNormalMoments) {
  const auto rule = mfclt::gauss_hermite_normal(24);
  double m0 = 0.0, m2 = 0.0, m4 = 0.0, m6 = 0.0;
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const double x = rule.nodes[i], w = rule.weights[i];
    m0 += w;
    m2 += w * x * x;
    m4 += w * std::pow(x, 4);
    m6 += w * std::pow(x, 6);
  }
  EXPECT_NEAR(m0, 1.0, 1e-13);
  EXPECT_NEAR(m2, 1.0, 1e-13);
  EXPECT_NEAR(m4, 3.0, 1e-12);
  EXPECT_NEAR(m6, 15.0, 1e-11);
}

TEST(Particles, ZeroCoefficientsKeepInitialDraws) {
  const auto model = frozen_model(SamplerSpec::normal(0.0, 1.0));
  const auto traj = mfclt::simulate_particles(model, 50, 0.1, 1.0, 3);
  ASSERT_EQ(traj.steps, 10u);
  for (std::size_t k = 0; k <= traj.steps; ++k)
    for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(traj.at(k, i, 0), traj.at(0, i, 0));
}

TEST(Particles, OuMeanFromDiracOne) {
  const auto model = mfclt::ou_model(SamplerSpec::discrete(DiscreteMeasure::dirac(1.0)));
  EXPECT_TRUE(model.flags.is_dirac_initial);
  const auto traj = mfclt::simulate_particles(model, 4000, 0.01, 1.0, 11);
  const auto last = traj.state(traj.steps);
  const auto est = mfclt::mean_with_error(last);
  EXPECT_NEAR(est.mean, std::exp(-1.0), 4.0 * est.std_error + 0.003);
}

TEST(Particles, MeanRevertConservesMeanEveryStep) {
  const auto model = mfclt::mean_revert_model(SamplerSpec::normal(0.0, 1.0), 1.0, 0.0);
  mfclt::ParticleOptions opts;
  opts.initial_positions = {0.0, 2.0};
  const auto traj = mfclt::simulate_particles(model, 2, 0.01, 2.0, 1, opts);
  for (std::size_t k = 0; k <= traj.steps; ++k) EXPECT_NEAR(0.5 * (traj.at(k, 0, 0) + traj.at(k, 1, 0)), 1.0, 1e-14);
  const double gap = euler_decay(2.0, 0.01);
  EXPECT_NEAR(traj.at(traj.steps, 0, 0), 1.0 - gap, 1e-12);
  EXPECT_NEAR(traj.at(traj.steps, 1, 0), 1.0 + gap, 1e-12);
}

TEST(Particles, SameSeedSameTensor) {
  const auto model = mfclt::bounded_sine_model(SamplerSpec::normal(0.0, 1.0));
  const auto a = mfclt::simulate_particles(model, 40, 0.05, 1.0, 9);
  const auto b = mfclt::simulate_particles(model, 40, 0.05, 1.0, 9);
  const auto c = mfclt::simulate_particles(model, 40, 0.05, 1.0, 10);
  EXPECT_EQ(a.data, b.data);
  EXPECT_NE(a.data, c.data);
}

TEST(Particles, NonFiniteStateNamesStep) {
  const auto model = mfclt::pointwise_model(
      "blowup", 1, 1,
      [](std::span<const double> x, const DiscreteMeasure&, std::span<double> out) { out[0] = 1e200 * (1.0 + x[0] * x[0]); },
      [](auto, const DiscreteMeasure&, std::span<double> out) { out[0] = 0.0; }, SamplerSpec::normal(0.0, 1.0));
  try {
    mfclt::simulate_particles(model, 4, 0.5, 5.0, 1);
    FAIL() << "expected NumericError";
  } catch (const mfclt::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 2"), std::string::npos) << e.what();
  }
}

TEST(Particles, RejectsBadArguments) {
  const auto model = mfclt::ou_model(SamplerSpec::normal(0.0, 1.0));
  EXPECT_THROW(mfclt::simulate_particles(model, 1, 0.01, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(mfclt::simulate_particles(model, 10, 0.0, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(mfclt::simulate_particles(model, 10, 0.1, 0.05, 1), std::invalid_argument);
  EXPECT_THROW(mfclt::simulate_particles(model, 10, 0.03, 1.0, 1), std::invalid_argument);
}

TEST(Reference, OuVarianceFromDiracZero) {
  const auto model = mfclt::ou_model(SamplerSpec::discrete(DiscreteMeasure::dirac(0.0)));
  const std::size_t m = 20000;
  const auto ref = mfclt::simulate_limit_reference(model, m, 0.01, 1.0, 5);
  const auto& last = ref.snapshots.back();
  const double mean = mean_of(last);
  const double var = last.integrate([&](std::span<const double> x) { return (x[0] - mean) * (x[0] - mean); });
  // Antithetic pairing makes the cloud mean exactly zero.
  EXPECT_NEAR(mean, 0.0, 1e-12);
  const double discrete = (1.0 - std::pow(0.99, 200)) / (2.0 - 0.01);
  const double se = std::sqrt(2.0 / static_cast<double>(m)) * discrete;
  EXPECT_NEAR(var, discrete, 4.0 * se);
  EXPECT_NEAR(var, (1.0 - std::exp(-2.0)) / 2.0, 4.0 * se + 0.004);
}

TEST(Reference, DeterministicFlowPushesAtomsForward) {
  const auto model = decay_model(SamplerSpec::normal(0.0, 1.0));
  const auto ref = mfclt::simulate_limit_reference(model, 101, 0.1, 1.0, 2);
  const auto proxy = SamplerSpec::normal(0.0, 1.0).proxy(101);
  for (std::size_t k = 0; k < ref.snapshots.size(); ++k)
    for (std::size_t i = 0; i < proxy.size(); ++i)
      EXPECT_NEAR(ref.snapshots[k].point(i)[0], std::pow(0.9, static_cast<double>(k)) * proxy.point(i)[0], 1e-12);
}

TEST(Reference, SecondMomentFollowsMomentRecursion) {
  // Mean-revert conserves the mean m, and E[X^2] - m^2 obeys
  // v' = (1 - kappa dt)^2 v + s^2 dt per step.
  const double kappa = 1.0, s = 0.8, dt = 0.01, m = 0.5;
  const auto model = mfclt::mean_revert_model(SamplerSpec::normal(m, 1.0), kappa, s);
  const std::size_t n = 4000;
  const auto traj = mfclt::simulate_particles(model, n, dt, 1.0, 21);
  double v = 1.0;
  for (std::size_t k = 0; k < traj.steps; ++k) v = (1.0 - kappa * dt) * (1.0 - kappa * dt) * v + s * s * dt;
  const double expected = v + m * m;
  std::vector<double> squares(n);
  for (std::size_t i = 0; i < n; ++i) squares[i] = traj.at(traj.steps, i, 0) * traj.at(traj.steps, i, 0);
  const auto est = mfclt::mean_with_error(squares);
  EXPECT_NEAR(est.mean, expected, 3.0 * est.std_error);
}

TEST(Cloud, ReplicatesSmallSupportsAntithetically) {
  const auto cloud = mfclt::cloud_from_measure(three_atoms(), 12);
  ASSERT_EQ(cloud.size(), 12u);
  EXPECT_NEAR(cloud.weights[0], 0.3 / 4.0, 1e-15);
  EXPECT_EQ(cloud.noise_block[0], cloud.noise_block[3]);
  EXPECT_EQ(cloud.noise_sign[0], -cloud.noise_sign[3]);
  EXPECT_NE(cloud.noise_block[0], cloud.noise_block[4]);
  EXPECT_TRUE(mfclt::same_measure(cloud.measure(), three_atoms(), 1e-15));
}

TEST(Cloud, ResamplesLargeSupportsSystematically) {
  const auto mu = SamplerSpec::normal(0.0, 1.0).proxy(1000);
  const auto cloud = mfclt::cloud_from_measure(mu, 100);
  ASSERT_EQ(cloud.size(), 100u);
  // Mirror-symmetric source and symmetric selection keep the mean at zero.
  EXPECT_NEAR(mean_of(cloud.measure()), 0.0, 1e-12);
}

mfclt::MasterEvaluator ou_evaluator(Functional phi, std::size_t inner = 1000) {
  return mfclt::MasterEvaluator{std::move(phi), mfclt::ou_model(SamplerSpec::normal(0.0, 1.0)), inner};
}

TEST(MasterValue, ExactAtTimeZero) {
  const auto ev = ou_evaluator(mean_square());
  EXPECT_EQ(mfclt::master_value(ev, 0.0, three_atoms(), 1), mean_square().value(three_atoms()));
}

TEST(MasterValue, OuLinearDecaysTheMean) {
  const auto ev = ou_evaluator(linear_x(), 1200);
  const double m = mean_of(three_atoms());
  for (double t : {0.5, 1.0}) {
    const double v = mfclt::master_value(ev, t, three_atoms(), 4);
    EXPECT_NEAR(v, euler_decay(t, 0.01) * m, 1e-12);
    EXPECT_NEAR(v, std::exp(-t) * m, 0.002);
  }
}

TEST(MasterValue, OuMeanSquare) {
  const auto ev = ou_evaluator(mean_square(), 1200);
  const double m = mean_of(three_atoms());
  const double v = mfclt::master_value(ev, 0.5, three_atoms(), 4);
  EXPECT_NEAR(v, std::pow(std::exp(-0.5) * m, 2), 0.002);
}

TEST(MasterLfd, TimeZeroMatchesFunctionalDerivative) {
  auto ev = ou_evaluator(mean_square());
  ev.richardson = true;
  const auto nu = three_atoms();
  const auto symbolic = mean_square().derivative(1);
  for (double y : {-1.5, 0.7, 2.0}) {
    const double numeric = mfclt::master_lfd(ev, 0.0, nu, std::vector<double>{y}, 1);
    EXPECT_NEAR(numeric, symbolic(nu, std::vector<double>{y}), 1e-10);
  }
}

TEST(MasterLfd, OuLinearIsDecayedIdentity) {
  const auto ev = ou_evaluator(linear_x());
  const auto nu = three_atoms();
  for (double y : {-2.0, 1.0, 3.0}) {
    const double v = mfclt::master_lfd(ev, 1.0, nu, std::vector<double>{y}, 2);
    EXPECT_NEAR(v, euler_decay(1.0, 0.01) * y, 1e-9);
    EXPECT_NEAR(v, std::exp(-1.0) * y, 0.01 * std::abs(y));
  }
  EXPECT_EQ(mfclt::master_lfd(ev, 1.0, nu, std::vector<double>{0.0}, 2), 0.0);
}

TEST(MasterLderiv, ClosedForms) {
  const auto nu = three_atoms();
  const double m = mean_of(nu);
  const auto lin = ou_evaluator(linear_x());
  for (double y : {-1.0, 0.0, 2.5}) {
    const auto g = mfclt::master_lderiv(lin, 0.5, nu, std::vector<double>{y}, 3);
    ASSERT_EQ(g.size(), 1u);
    EXPECT_NEAR(g[0], euler_decay(0.5, 0.01), 1e-9);
  }
  auto quad = ou_evaluator(mean_square(), 2000);
  quad.richardson = true;
  const double c = euler_decay(0.5, 0.01);
  const auto g = mfclt::master_lderiv(quad, 0.5, nu, std::vector<double>{1.0}, 3);
  EXPECT_NEAR(g[0], 2.0 * c * m * c, 2e-3);
  EXPECT_NEAR(g[0], 2.0 * std::exp(-1.0) * m, 5e-3);

  const mfclt::MasterEvaluator still{linear_x(), frozen_model(SamplerSpec::normal(0.0, 1.0)), 200};
  for (double t : {0.0, 0.3})
    for (double y : {-1.0, 4.0}) EXPECT_NEAR(mfclt::master_lderiv(still, t, nu, std::vector<double>{y}, 1)[0], 1.0, 1e-9);
}

TEST(MasterSecond, VanishesForLinearPhiUnderOu) {
  const auto ev = ou_evaluator(linear_x(), 500);
  const auto h = mfclt::master_lhessian(ev, 0.5, three_atoms(), std::vector<double>{0.3}, 1);
  const auto s = mfclt::master_second_lderiv(ev, 0.5, three_atoms(), std::vector<double>{0.3}, 1);
  EXPECT_NEAR(h(0, 0), 0.0, 1e-8);
  EXPECT_NEAR(s(0, 0), 0.0, 1e-6);
}

TEST(MasterSecond, QuadraticMeanSecondDerivative) {
  // d^2_mu of (c m)^2 at (y, y) is 2 c^2 in the flow; the FD bias in eps vanishes here.
  auto ev = ou_evaluator(mean_square(), 1000);
  const auto s = mfclt::master_second_lderiv(ev, 0.3, three_atoms(), std::vector<double>{0.5}, 1);
  const double c = euler_decay(0.3, 0.01);
  EXPECT_NEAR(s(0, 0), 2.0 * c * c, 1e-4);
}

TEST(Theta, EstimatorIsZeroForLinearPhiAndLinearDynamics) {
  auto ev = ou_evaluator(linear_x(), 200);
  ev.extra_copies = 4;
  const auto traj = mfclt::simulate_particles(ev.model, 50, 0.01, 0.5, 8);
  mfclt::ThetaOptions opts;
  opts.time_stride = 10;
  opts.particle_samples = 3;
  const double theta = mfclt::theta_term_estimate(ev, traj, 0.5, 1, opts);
  EXPECT_NEAR(theta, 0.0, 1e-9);
}

TEST(Residual, OuLinearWithinBudget) {
  const auto ev = ou_evaluator(linear_x(), 2000);
  for (double t : {0.25, 0.5}) {
    const auto r = mfclt::master_equation_residual(ev, t, three_atoms(), 6);
    EXPECT_TRUE(r.within) << "t=" << t << " residual " << r.residual << " budget " << r.budget;
    EXPECT_NEAR(r.lhs, -std::exp(-t) * mean_of(three_atoms()), 0.01);
    EXPECT_NEAR(r.rhs, -std::exp(-t) * mean_of(three_atoms()), 0.01);
  }
}

TEST(Residual, StaticModelBothSidesZero) {
  const mfclt::MasterEvaluator ev{linear_x(), frozen_model(SamplerSpec::normal(0.0, 1.0)), 100};
  const auto r = mfclt::master_equation_residual(ev, 0.0, three_atoms(), 6);
  EXPECT_NEAR(r.lhs, 0.0, 1e-12);
  EXPECT_NEAR(r.rhs, 0.0, 1e-9);
  EXPECT_TRUE(r.within);
}

TEST(TheoreticalCovariance, GateRefusesUndeclaredHypotheses) {
  const auto model = mfclt::ou_model(SamplerSpec::normal(0.0, 1.0));
  const std::vector<double> times{1.0};
  EXPECT_THROW(mfclt::theoretical_covariance(linear_x(), model, times, {}, 1), mfclt::HypothesisError);
}

TEST(TheoreticalCovariance, OuClosedForm) {
  const auto model = mfclt::ou_model(SamplerSpec::normal(0.0, 1.0));
  const std::vector<double> times{0.5, 1.0};
  mfclt::CovarianceConfig cfg;
  cfg.force = true;
  cfg.inner_particles = 200;
  cfg.reference_particles = 400;
  cfg.path_samples = 4;
  cfg.quad_stride = 2;
  const auto rep = mfclt::theoretical_covariance(linear_x(), model, times, cfg, 3);
  EXPECT_EQ(rep.initial_method, "gauss-hermite");
  auto closed = [](double a, double b) {
    return std::exp(-(a + b)) * (1.0 + (std::exp(2.0 * std::min(a, b)) - 1.0) / 2.0);
  };
  EXPECT_NEAR(closed(1.0, 1.0), 0.56767, 5e-5);
  EXPECT_NEAR(closed(0.5, 1.0), 0.41485, 5e-5);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      const double target = closed(times[i], times[j]);
      EXPECT_NEAR(rep.value(i, j), target, 0.05 * target + rep.std_error(i, j)) << i << "," << j;
      EXPECT_EQ(rep.value(i, j), rep.value(j, i));
    }
  EXPECT_NEAR(rep.initial_term(1, 1), std::pow(euler_decay(1.0, 0.01), 2), 1e-9);
}

TEST(TheoreticalCovariance, StaticModelHasOnlyInitialTerm) {
  const auto model = frozen_model(SamplerSpec::uniform(0.0, 2.0));
  const std::vector<double> times{0.2, 0.4};
  mfclt::CovarianceConfig cfg;
  cfg.inner_particles = 100;
  cfg.reference_particles = 100;
  cfg.path_samples = 2;
  const auto rep = mfclt::theoretical_covariance(linear_x(), model, times, cfg, 3);
  EXPECT_EQ(rep.initial_method, "gauss-legendre");
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(rep.noise_term(i, j), 0.0, 1e-12);
      EXPECT_NEAR(rep.value(i, j), 1.0 / 3.0, 1e-9);
    }
}

TEST(TheoreticalCovariance, DiracInitialHasNoInitialTerm) {
  const auto model = mfclt::bounded_sine_model(SamplerSpec::discrete(DiscreteMeasure::dirac(0.0)));
  const std::vector<double> times{0.2};
  mfclt::CovarianceConfig cfg;
  cfg.inner_particles = 100;
  cfg.reference_particles = 100;
  cfg.path_samples = 2;
  const auto rep = mfclt::theoretical_covariance(linear_x(), model, times, cfg, 3);
  EXPECT_EQ(rep.initial_method, "dirac");
  EXPECT_EQ(rep.initial_term(0, 0), 0.0);
  EXPECT_GT(rep.noise_term(0, 0), 0.0);
}

TEST(TheoreticalCovariance, RejectsTooManyTimes) {
  const auto model = mfclt::bounded_sine_model(SamplerSpec::normal(0.0, 1.0));
  std::vector<double> times;
  for (int i = 1; i <= 9; ++i) times.push_back(0.1 * i);
  EXPECT_THROW(mfclt::theoretical_covariance(linear_x(), model, times, {}, 1), std::invalid_argument);
}

class OuFluctuation : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto model = mfclt::ou_model(SamplerSpec::normal(0.0, 1.0));
    const std::vector<double> times{0.5, 1.0};
    report_ = new mfclt::FluctuationReport(mfclt::fluctuation_process(linear_x(), model, 500, times, 500, 17));
  }
  static void TearDownTestSuite() { delete report_; }
  static mfclt::FluctuationReport* report_;
};
mfclt::FluctuationReport* OuFluctuation::report_ = nullptr;

double ou_sigma(double a, double b) { return std::exp(-(a + b)) * (1.0 + (std::exp(2.0 * std::min(a, b)) - 1.0) / 2.0); }

mfclt::Matrix ou_sigma_matrix(const std::vector<double>& times) {
  mfclt::Matrix s(times.size(), times.size());
  for (std::size_t i = 0; i < times.size(); ++i)
    for (std::size_t j = 0; j < times.size(); ++j) s(i, j) = ou_sigma(times[i], times[j]);
  return s;
}

TEST_F(OuFluctuation, EmpiricalCovarianceMatchesClosedForm) {
  const auto& r = *report_;
  ASSERT_EQ(r.f_samples.rows(), 500u);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_NEAR(r.sigma_empirical(i, j), ou_sigma(r.times[i], r.times[j]), 3.0 * r.sigma_empirical_se(i, j) + 0.01);
      EXPECT_EQ(r.sigma_empirical(i, j), r.sigma_empirical(j, i));
    }
  for (double b : r.reference_bias) EXPECT_LT(b, 1e-12);
}

TEST_F(OuFluctuation, CramerWoldAcceptsGaussianLimit) {
  const auto tests = mfclt::cramer_wold_normality(report_->f_samples, ou_sigma_matrix(report_->times),
                                                  mfclt::default_directions(2));
  ASSERT_EQ(tests.size(), 3u);
  for (const auto& t : tests) {
    EXPECT_FALSE(t.skipped);
    EXPECT_GT(t.p_value, 0.01);
  }
}

TEST_F(OuFluctuation, CramerWoldRejectsExponentialSamples) {
  mfclt::Matrix fake(500, 2);
  mfclt::RandomStream rng(3, mfclt::StreamTag::kProbe);
  for (std::size_t r = 0; r < 500; ++r)
    for (std::size_t i = 0; i < 2; ++i) fake(r, i) = -std::log(1.0 - rng.uniform()) - 1.0;
  const auto tests = mfclt::cramer_wold_normality(fake, ou_sigma_matrix(report_->times), mfclt::default_directions(2));
  for (const auto& t : tests) EXPECT_LT(t.p_value, 0.01);
}

TEST(Fluctuation, WorkerCountDoesNotChangeSamples) {
  const auto model = mfclt::bounded_sine_model(SamplerSpec::normal(0.0, 1.0));
  const std::vector<double> times{0.1, 0.2};
  mfclt::FluctuationOptions one, four;
  one.workers = 1;
  four.workers = 4;
  const auto a = mfclt::fluctuation_process(linear_x(), model, 30, times, 40, 5, one);
  const auto b = mfclt::fluctuation_process(linear_x(), model, 30, times, 40, 5, four);
  EXPECT_EQ(a.f_samples.data(), b.f_samples.data());
}

TEST(Fluctuation, StaticModelGivesStaticClt) {
  const auto model = frozen_model(SamplerSpec::normal(0.0, 1.0));
  const std::vector<double> times{0.0, 0.5};
  const auto r = mfclt::fluctuation_process(linear_x(), model, 200, times, 400, 7);
  EXPECT_EQ(r.f_samples.column(0), r.f_samples.column(1));
  EXPECT_NEAR(r.sigma_empirical(1, 1), 1.0, 3.0 * r.sigma_empirical_se(1, 1));
}

TEST(Fluctuation, DiracStaticIsZero) {
  const auto model = frozen_model(SamplerSpec::discrete(DiscreteMeasure::dirac(2.0)));
  const std::vector<double> times{0.5};
  const auto r = mfclt::fluctuation_process(linear_x(), model, 20, times, 30, 7);
  for (double f : r.f_samples.data()) EXPECT_NEAR(f, 0.0, 1e-12);
  const auto tests = mfclt::cramer_wold_normality(r.f_samples, r.sigma_empirical, mfclt::default_directions(1));
  ASSERT_EQ(tests.size(), 1u);
  EXPECT_TRUE(tests[0].skipped);
}

TEST(CramerWold, RequiresAxesAndThreeDirections) {
  mfclt::Matrix samples(30, 2, 0.0), sigma(2, 2, 0.0);
  sigma(0, 0) = sigma(1, 1) = 1.0;
  EXPECT_THROW(mfclt::cramer_wold_normality(samples, sigma, {{1.0, 0.0}, {0.0, 1.0}}), std::invalid_argument);
  EXPECT_THROW(mfclt::cramer_wold_normality(samples, sigma, {{1.0, 0.0}, {0.6, 0.8}, {0.8, 0.6}}), std::invalid_argument);
}

TEST(FourthMoment, TimeIncrementDecaysLikeInverseSquare) {
  const auto model = mfclt::ou_model(SamplerSpec::normal(0.0, 1.0));
  mfclt::FourthMomentOptions opts;
  opts.dt = 0.02;
  opts.inner_particles = 200;
  opts.reference_particles = 4000;
  const auto r = mfclt::time_increment_fourth_moment(linear_x(), model, 0.5, 1.0, {50, 158, 500}, 400, 2, opts);
  EXPECT_NEAR(r.slope, -2.0, 0.4);
}

TEST(SpotCheck, BuiltInModels) {
  const auto ou = mfclt::spot_check_model(mfclt::ou_model(SamplerSpec::normal(0.0, 1.0)), 50, 1);
  EXPECT_NEAR(ou.lipschitz_estimate, 1.0, 1e-12);
  EXPECT_TRUE(ou.positive_semidefinite);
  const auto sine = mfclt::spot_check_model(mfclt::bounded_sine_model(SamplerSpec::normal(0.0, 1.0)), 50, 1);
  EXPECT_LE(sine.lipschitz_estimate, 1.0 + 1e-12);
  EXPECT_EQ(sine.max_asymmetry, 0.0);
}

}  // namespace
