#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mfclt/measure.hpp"
#include "mfclt/rng.hpp"

namespace {

using mfclt::DiscreteMeasure;

TEST(Empirical, SingleSample) {
  const auto mu = mfclt::empirical_from_samples({{0.0}});
  ASSERT_EQ(mu.size(), 1u);
  EXPECT_EQ(mu.point(0)[0], 0.0);
  EXPECT_EQ(mu.weight(0), 1.0);
}

TEST(Empirical, DuplicatesKept) {
  const auto mu = mfclt::empirical_from_samples({{1.0}, {1.0}});
  ASSERT_EQ(mu.size(), 2u);
  EXPECT_EQ(mu.weight(0), 0.5);
  EXPECT_EQ(mu.weight(1), 0.5);
  EXPECT_DOUBLE_EQ(mfclt::moment(mu, 1.0), 1.0);
  EXPECT_EQ(mu.merged().size(), 1u);
}

TEST(Empirical, SecondMoment) {
  EXPECT_DOUBLE_EQ(mfclt::moment(mfclt::empirical_from_samples({{0.0}, {2.0}}), 2.0), 2.0);
}

TEST(Empirical, EmptyInputRejected) {
  try {
    mfclt::empirical_from_samples(std::vector<std::vector<double>>{});
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "empty sample set");
  }
  EXPECT_THROW(mfclt::empirical_from_samples({{1.0}, {1.0, 2.0}}), std::invalid_argument);
}

TEST(Construction, InvariantsEnforced) {
  EXPECT_THROW(DiscreteMeasure(1, {0.0, 1.0}, {0.5, 0.4}), std::invalid_argument);
  EXPECT_THROW(DiscreteMeasure(1, {0.0, 1.0}, {1.5, -0.5}), std::invalid_argument);
  EXPECT_THROW(DiscreteMeasure(2, {0.0, 1.0, 2.0}, {1.0}), std::invalid_argument);
  EXPECT_NO_THROW(DiscreteMeasure(1, {0.0, 1.0}, {0.5, 0.5 + 5e-13}));
}

TEST(Construction, NormalizedPrunesTinyWeights) {
  const auto mu = DiscreteMeasure::normalized(1, {0.0, 1.0, 2.0}, {1.0, 1e-17, 1.0});
  ASSERT_EQ(mu.size(), 2u);
  EXPECT_EQ(mu.weight(0), 0.5);
}

TEST(Moment, Examples) {
  EXPECT_EQ(mfclt::moment(DiscreteMeasure::dirac(0.0), 2.0), 0.0);
  EXPECT_DOUBLE_EQ(mfclt::moment(DiscreteMeasure(1, {0.0, 2.0}, {0.5, 0.5}), 2.0), 2.0);
  EXPECT_DOUBLE_EQ(mfclt::moment(DiscreteMeasure(2, {3.0, 4.0}, {1.0}), 1.0), 5.0);
  EXPECT_THROW(mfclt::moment(DiscreteMeasure::dirac(1.0), -1.0), std::invalid_argument);
}

TEST(Interpolate, Endpoints) {
  const DiscreteMeasure mu(1, {0.0, 3.0}, {0.25, 0.75});
  const DiscreteMeasure nu(1, {1.0}, {1.0});
  EXPECT_TRUE(mfclt::same_measure(mfclt::interpolate(mu, nu, 0.0), mu));
  EXPECT_TRUE(mfclt::same_measure(mfclt::interpolate(mu, nu, 1.0), nu));
}

TEST(Interpolate, Midpoint) {
  const auto m = mfclt::interpolate(DiscreteMeasure::dirac(0.0), DiscreteMeasure::dirac(1.0), 0.5);
  EXPECT_TRUE(mfclt::same_measure(m, DiscreteMeasure(1, {0.0, 1.0}, {0.5, 0.5})));
}

TEST(Interpolate, Idempotent) {
  const DiscreteMeasure mu(1, {0.0, 3.0}, {0.25, 0.75});
  EXPECT_TRUE(mfclt::same_measure(mfclt::interpolate(mu, mu, 0.3), mu, 1e-15));
}

TEST(Interpolate, RejectsBadParameter) {
  const auto mu = DiscreteMeasure::dirac(0.0);
  EXPECT_THROW(mfclt::interpolate(mu, mu, 1.5), std::invalid_argument);
  EXPECT_THROW(mfclt::interpolate(mu, mu, -0.1), std::invalid_argument);
  EXPECT_THROW(mfclt::interpolate(mu, DiscreteMeasure(2, {0.0, 0.0}, {1.0}), 0.5), std::invalid_argument);
}

TEST(Interpolate, MassAndMomentsAreAffine) {
  mfclt::RandomStream rng(5, mfclt::StreamTag::kProbe);
  for (int trial = 0; trial < 200; ++trial) {
    auto random_measure = [&] {
      const std::size_t n = 1 + rng.below(6);
      std::vector<double> x(2 * n), w(n);
      for (double& v : x) v = rng.uniform(-3, 3);
      for (double& v : w) v = rng.uniform() + 0.01;
      return DiscreteMeasure::normalized(2, x, w);
    };
    const auto mu = random_measure();
    const auto nu = random_measure();
    const double s = rng.uniform();
    const auto m = mfclt::interpolate(mu, nu, s);
    double mass = 0;
    for (double w : m.weights()) mass += w;
    EXPECT_NEAR(mass, 1.0, 1e-14);
    for (double ell : {0.5, 1.0, 2.0, 3.0}) {
      const double expected = (1 - s) * mfclt::moment(mu, ell) + s * mfclt::moment(nu, ell);
      EXPECT_NEAR(mfclt::moment(m, ell), expected, 1e-12 * (1 + expected));
    }
  }
}

TEST(TextFormat, RoundTripIsExact) {
  mfclt::RandomStream rng(8, mfclt::StreamTag::kProbe);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 1 + rng.below(3), n = 1 + rng.below(7);
    std::vector<double> x(d * n), w(n);
    for (double& v : x) v = rng.normal() * 1e3;
    for (double& v : w) v = rng.uniform() + 1e-3;
    const auto mu = DiscreteMeasure::normalized(d, x, w);
    const auto back = mfclt::from_text(mfclt::to_text(mu));
    ASSERT_EQ(back.dim(), mu.dim());
    ASSERT_EQ(back.size(), mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) {
      EXPECT_EQ(back.weight(i), mu.weight(i));
      for (std::size_t k = 0; k < d; ++k) EXPECT_EQ(back.point(i)[k], mu.point(i)[k]);
    }
  }
}

TEST(TextFormat, HeaderLayout) {
  const auto text = mfclt::to_text(DiscreteMeasure(2, {1.0, 2.0, 3.0, 4.0}, {0.5, 0.5}));
  EXPECT_EQ(text, "dim=2 atoms=2\n0.5 1 2\n0.5 3 4\n");
  EXPECT_THROW(mfclt::from_text("dims=2\n"), std::invalid_argument);
  EXPECT_THROW(mfclt::from_text("dim=1 atoms=2\n1 0\n"), std::invalid_argument);
}

}  // namespace
