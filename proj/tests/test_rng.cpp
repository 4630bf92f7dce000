#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "mfclt/parallel.hpp"
#include "mfclt/rng.hpp"

namespace {

using mfclt::Philox4x32;

TEST(Philox, KnownAnswerZero) {
  const auto out = Philox4x32::generate({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(out[0], 0x6627e8d5u);
  EXPECT_EQ(out[1], 0xe169c58du);
  EXPECT_EQ(out[2], 0xbc57ac4cu);
  EXPECT_EQ(out[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerOnes) {
  const auto out = Philox4x32::generate({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(out[0], 0x408f276du);
  EXPECT_EQ(out[1], 0x41c83b0eu);
  EXPECT_EQ(out[2], 0xa20bc7c6u);
  EXPECT_EQ(out[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPi) {
  const auto out = Philox4x32::generate({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(out[0], 0xd16cfe09u);
  EXPECT_EQ(out[1], 0x94fdccebu);
  EXPECT_EQ(out[2], 0x5001e420u);
  EXPECT_EQ(out[3], 0x24126ea1u);
}

TEST(RandomStream, SameKeySameSequence) {
  mfclt::RandomStream a(42, mfclt::StreamTag::kCltReplication, 3, 1);
  mfclt::RandomStream b(42, mfclt::StreamTag::kCltReplication, 3, 1);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RandomStream, DistinctKeysDiffer) {
  std::set<std::uint64_t> firsts;
  for (std::uint32_t rep = 0; rep < 50; ++rep) {
    for (auto tag : {mfclt::StreamTag::kCltReplication, mfclt::StreamTag::kParticleNoise}) {
      mfclt::RandomStream s(7, tag, rep, 0);
      firsts.insert(s.next_u64());
    }
  }
  EXPECT_EQ(firsts.size(), 100u);
}

TEST(RandomStream, UniformAndNormalMoments) {
  mfclt::RandomStream s(1, mfclt::StreamTag::kProbe);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0, sn4 = 0;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    su += u;
    const double z = s.normal();
    sn += z;
    sn2 += z * z;
    sn4 += z * z * z * z;
  }
  EXPECT_NEAR(su / n, 0.5, 4 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(sn / n, 0.0, 4 / std::sqrt(n));
  EXPECT_NEAR(sn2 / n, 1.0, 4 * std::sqrt(2.0 / n));
  EXPECT_NEAR(sn4 / n, 3.0, 4 * std::sqrt(96.0 / n));
}

TEST(RandomStream, RandomAccessNormalsMatchPairs) {
  const mfclt::StreamKey key{9, mfclt::StreamTag::kInnerNoise, 2, 5};
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto pair = mfclt::normal_pair_at(key, i / 2);
    EXPECT_EQ(mfclt::normal_at(key, i), pair[i % 2]);
  }
}

TEST(Parallel, ResultsIndependentOfWorkerCount) {
  auto run = [](unsigned workers) {
    std::vector<double> out(257);
    mfclt::parallel_for(out.size(), workers, [&](std::size_t i) {
      mfclt::RandomStream s(11, mfclt::StreamTag::kCltReplication, static_cast<std::uint32_t>(i));
      out[i] = s.normal();
    });
    return out;
  };
  const auto one = run(1);
  EXPECT_EQ(one, run(4));
  EXPECT_EQ(one, run(8));
}

TEST(Parallel, PropagatesExceptions) {
  EXPECT_THROW(mfclt::parallel_for(10, 3, [](std::size_t i) {
                 if (i == 7) throw std::runtime_error("boom");
               }),
               std::runtime_error);
}

}  // namespace
