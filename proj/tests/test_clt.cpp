#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mfclt/clt.hpp"
#include "mfclt/registry.hpp"

namespace {

using mfclt::DiscreteMeasure;
using mfclt::Functional;
using mfclt::SamplerSpec;

SamplerSpec eight_atoms() {
  return SamplerSpec::discrete(DiscreteMeasure(1, {-2.0, -1.1, -0.4, 0.0, 0.3, 0.9, 1.7, 2.6},
                                               {0.05, 0.1, 0.15, 0.2, 0.2, 0.15, 0.1, 0.05}));
}

// Same functional with the moment form hidden, to force the generic decomposition path.
class OpaqueNode final : public mfclt::FunctionalNode {
 public:
  explicit OpaqueNode(Functional inner) : inner_(std::move(inner)) {}
  std::size_t dim() const override { return inner_.dim(); }
  double value(const DiscreteMeasure& mu) const override { return inner_.value(mu); }
  int max_order() const override { return inner_.max_order(); }
  mfclt::BoundDerivative bind(int order, const DiscreteMeasure& mu) const override { return inner_.bind(order, mu); }
  std::string describe() const override { return "opaque"; }

 private:
  Functional inner_;
};

Functional opaque(const Functional& u) { return Functional(std::make_shared<OpaqueNode>(u)); }

TEST(AsymptoticVariance, QuantileClosedForm) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto v = mfclt::asymptotic_variance(mfclt::make_functional("quantile:0.5", law), law, 1);
  EXPECT_NEAR(v.value, std::numbers::pi / 2, 1e-10);
  EXPECT_FALSE(v.degenerate);
}

TEST(AsymptoticVariance, CubeOfSecondMomentMonteCarlo) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto v = mfclt::asymptotic_variance(mfclt::make_functional("cube-of-second-moment", law), law, 2);
  EXPECT_GT(v.std_error, 0.0);
  EXPECT_LT(std::abs(v.value - 18.0), 3 * v.std_error + 1e-3);
}

TEST(AsymptoticVariance, SinFiveHalvesDegenerate) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto v = mfclt::asymptotic_variance(mfclt::make_functional("sin-five-halves", law), law, 3);
  EXPECT_LT(v.value, 1e-12);
  EXPECT_TRUE(v.degenerate);
}

TEST(AsymptoticVariance, DiscreteIsExact) {
  const auto law = eight_atoms();
  const auto v = mfclt::asymptotic_variance(mfclt::make_functional("linear-x", law), law, 4);
  const auto& m = law.atoms();
  double mean = 0, second = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    mean += m.weight(i) * m.point(i)[0];
    second += m.weight(i) * m.point(i)[0] * m.point(i)[0];
  }
  EXPECT_NEAR(v.value, second - mean * mean, 1e-14);
  EXPECT_EQ(v.std_error, 0.0);
}

TEST(Reference, ProxyErrorIsSmall) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto r = mfclt::reference_value(mfclt::make_functional("linear-square", law), law);
  EXPECT_NEAR(r.value, 1.0, 1e-4);
  EXPECT_LT(r.error, 1e-4);
  const auto q = mfclt::reference_value(mfclt::make_functional("quantile:0.975", law), law);
  EXPECT_NEAR(q.value, 1.959963984540054, 1e-12);
  const auto u = mfclt::reference_value(mfclt::make_functional("ustat-product", law), law);
  EXPECT_LE(u.proxy_size, 10000u);
  EXPECT_NEAR(u.value, 0.0, 1e-12);
}

TEST(CltRun, LinearCalibration) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto rep = mfclt::run_clt_experiment(mfclt::make_functional("linear-x", law), law, 1000, 1000, 7);
  EXPECT_EQ(rep.samples.size(), 1000u);
  EXPECT_GT(rep.sigma2_empirical, 0.9);
  EXPECT_LT(rep.sigma2_empirical, 1.1);
  EXPECT_GT(rep.ks_pvalue, 0.01);
  EXPECT_NEAR(rep.mean_abs_scaled, std::sqrt(2 / std::numbers::pi), 4 * rep.mean_abs_scaled_se);
}

TEST(CltRun, DegenerateSkipsKs) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto rep = mfclt::run_clt_experiment(mfclt::make_functional("sin-five-halves", law), law, 200, 100, 8);
  EXPECT_TRUE(rep.degenerate);
  EXPECT_TRUE(rep.ks_skipped);
  EXPECT_EQ(rep.samples.size(), 100u);
}

TEST(CltRun, Errors) {
  const auto law = SamplerSpec::normal(0, 1);
  EXPECT_THROW(mfclt::run_clt_experiment(mfclt::make_functional("linear-x", law), law, 100, 99, 1), std::invalid_argument);
}

TEST(CltRun, WorkerCountDoesNotChangeSamples) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto u = mfclt::make_functional("quantile:0.5", law);
  mfclt::CltOptions one, four;
  one.workers = 1;
  four.workers = 4;
  const auto a = mfclt::run_clt_experiment(u, law, 500, 200, 9, one);
  const auto b = mfclt::run_clt_experiment(u, law, 500, 200, 9, four);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) EXPECT_EQ(a.samples[i], b.samples[i]);
}

TEST(Decomposition, LinearHasNoRemainder) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto recs = mfclt::decompose_replications(mfclt::make_functional("linear-square", law), law, 200, 20, 10);
  for (const auto& r : recs) {
    EXPECT_EQ(r.r_n, 0.0);
    EXPECT_NEAR(r.q_n, r.delta_u, 1e-13);
  }
}

TEST(Decomposition, QuadraticExactWithTwoPoints) {
  const auto law = eight_atoms();
  mfclt::DecompositionOptions opt;
  opt.quad_points = 2;
  for (const auto& r : mfclt::decompose_replications(mfclt::make_functional("mean-square", law), law, 50, 20, 11, opt))
    EXPECT_LT(r.identity_residual, 1e-12);
  opt.quad_points = 4;
  for (const auto& r :
       mfclt::decompose_replications(mfclt::make_functional("cube-of-second-moment", law), law, 100, 20, 12, opt))
    EXPECT_LT(r.identity_residual, 1e-10);
}

TEST(Decomposition, MeanSquareRemainderMatchesBruteForce) {
  // For U = (int x)^2 the remainder is (1/N^2) sum_i (zeta_i - int x dm0)^2.
  const auto law = eight_atoms();
  const auto u = mfclt::make_functional("mean-square", law);
  mfclt::RandomStream rng(13, mfclt::StreamTag::kProbe);
  const auto x = law.sample_many(rng, 60);
  const double m0 = law.atoms().integrate([](std::span<const double> p) { return p[0]; });
  double expected = 0;
  for (double v : x) expected += (v - m0) * (v - m0);
  expected /= 60.0 * 60.0;
  EXPECT_NEAR(mfclt::martingale_decomposition(u, law, x).r_n, expected, 1e-14);
}

TEST(Decomposition, GenericPathMatchesMomentForm) {
  const auto law = eight_atoms();
  mfclt::RandomStream rng(14, mfclt::StreamTag::kProbe);
  const auto x = law.sample_many(rng, 40);
  for (const char* name : {"mean-square", "cube-of-second-moment", "linear-square"}) {
    const auto u = mfclt::make_functional(name, law);
    const auto fast = mfclt::martingale_decomposition(u, law, x);
    const mfclt::Decomposer generic(opaque(u), law);
    ASSERT_FALSE(generic.uses_moment_form());
    const auto slow = generic.run(x);
    EXPECT_NEAR(fast.q_n, slow.q_n, 1e-12) << name;
    EXPECT_NEAR(fast.r_n, slow.r_n, 1e-12) << name;
    EXPECT_NEAR(fast.delta_u, slow.delta_u, 1e-12) << name;
  }
}

TEST(Decomposition, UstatGenericIdentity) {
  const auto law = eight_atoms();
  for (const auto& r : mfclt::decompose_replications(mfclt::make_functional("ustat-product", law), law, 60, 10, 15))
    EXPECT_LT(r.identity_residual, 1e-10);
  const auto normal = SamplerSpec::normal(0, 1);
  mfclt::DecompositionOptions opt;
  opt.generic_proxy_size = 16;
  for (const auto& r :
       mfclt::decompose_replications(mfclt::make_functional("ustat-product", normal), normal, 40, 5, 16, opt))
    EXPECT_LT(r.identity_residual, 1e-10);
}

TEST(Scaling, LinearGivesSentinel) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto rep = mfclt::remainder_scaling(mfclt::make_functional("linear-x", law), law, {100, 316, 1000, 3162}, 20, 17);
  EXPECT_TRUE(rep.vanishing);
  EXPECT_TRUE(std::isinf(rep.slope) && rep.slope < 0);
}

TEST(Scaling, MeanSquareSlopeNearMinusOne) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto rep = mfclt::remainder_scaling(mfclt::make_functional("mean-square", law), law, {100, 316, 1000, 3162}, 300, 18);
  EXPECT_NEAR(rep.slope, -1.0, 0.2);
  EXPECT_GT(rep.r2, 0.9);
  EXPECT_THROW(mfclt::remainder_scaling(mfclt::make_functional("mean-square", law), law, {100, 200, 300, 400}, 10, 1),
               std::invalid_argument);
  EXPECT_THROW(mfclt::remainder_scaling(mfclt::make_functional("mean-square", law), law, {100, 3162, 1000, 5000}, 10, 1),
               std::invalid_argument);
}

TEST(SqrtNL1, LinearIsHalfNormalMean) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto rep = mfclt::sqrtn_l1_check(mfclt::make_functional("linear-x", law), law, {100, 1000}, 2000, 19);
  for (const auto& v : rep.values) EXPECT_NEAR(v.mean, std::sqrt(2 / std::numbers::pi), 4 * v.std_error);
  EXPECT_LT(rep.max_min_ratio, 1.2);
}

TEST(SqrtNL1, DegenerateShrinks) {
  const auto law = SamplerSpec::normal(0, 1);
  const auto rep = mfclt::sqrtn_l1_check(mfclt::make_functional("sin-five-halves", law), law, {100, 1000, 10000}, 200, 20);
  EXPECT_GT(rep.values[0].mean, rep.values[1].mean);
  EXPECT_GT(rep.values[1].mean, rep.values[2].mean);
}

TEST(FourthMoment, BoundedForSmoothFunctional) {
  // Nonzero mean keeps the first derivative alive, so N^2 E|dU|^4 tends to 3 Var(2 zeta)^2.
  const auto law = SamplerSpec::normal(1, 1);
  const auto rep = mfclt::fourth_moment_scaled(mfclt::make_functional("mean-square", law), law, {100, 316, 1000}, 400, 21);
  EXPECT_LT(rep.max_min_ratio, 3.0);
}

TEST(Martingale, IncrementsHaveZeroConditionalMean) {
  const auto law = SamplerSpec::normal(0, 1);
  for (const char* name : {"linear-square", "cube-of-second-moment", "mean-square"}) {
    const auto w = mfclt::martingale_increment_test(mfclt::make_functional(name, law), law, 100, 400, 22);
    EXPECT_GT(w.p_value, 0.01) << name;
    EXPECT_EQ(w.observations, 2000u);
  }
}

}  // namespace
