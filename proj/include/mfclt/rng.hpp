#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace mfclt {

// Philox4x32 with 10 rounds. Stateless: output is a pure function of counter and key.
class Philox4x32 {
 public:
  using Counter = std::array<std::uint32_t, 4>;
  using Key = std::array<std::uint32_t, 2>;

  static Counter generate(Counter ctr, Key key) {
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kWeyl0;
        key[1] += kWeyl1;
      }
      const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
      const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
      const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
      const auto lo0 = static_cast<std::uint32_t>(p0);
      const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
      const auto lo1 = static_cast<std::uint32_t>(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
    return ctr;
  }

 private:
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
};

inline constexpr const char* kRngAlgorithm = "philox4x32-10";

// Purposes get disjoint key spaces so that streams never share counters.
enum class StreamTag : std::uint32_t {
  kCltReplication = 1,
  kVarianceOuter = 2,
  kProxy = 3,
  kParticleInit = 4,
  kParticleNoise = 5,
  kReferenceNoise = 6,
  kInnerNoise = 7,
  kInnerResample = 8,
  kOuterXi = 9,
  kProbe = 10,
  kMetricSuite = 11,
  kScaling = 12,
  kMasterInitial = 13,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Identifies one independent stream: (seed, purpose, replication, block).
struct StreamKey {
  std::uint64_t seed = 0;
  StreamTag tag = StreamTag::kCltReplication;
  std::uint32_t replication = 0;
  std::uint32_t block = 0;

  Philox4x32::Key key() const {
    const std::uint64_t k = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(tag) + 0x632BE59BD9B4E019ull));
    return {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
  }

  Philox4x32::Counter counter(std::uint64_t index) const {
    return {static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32), replication, block};
  }
};

inline double uniform_from_bits(std::uint32_t hi, std::uint32_t lo) {
  const std::uint64_t bits = (std::uint64_t{hi} << 32) | lo;
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Pair of standard normals at a fixed position of a stream; random access by index.
inline std::array<double, 2> normal_pair_at(const StreamKey& key, std::uint64_t pair_index) {
  const auto out = Philox4x32::generate(key.counter(pair_index), key.key());
  const double u1 = 1.0 - uniform_from_bits(out[0], out[1]);
  const double u2 = uniform_from_bits(out[2], out[3]);
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

inline double normal_at(const StreamKey& key, std::uint64_t index) {
  return normal_pair_at(key, index / 2)[index % 2];
}

// Sequential view over one counter-based stream.
class RandomStream {
 public:
  explicit RandomStream(StreamKey key) : key_(key), philox_key_(key.key()) {}
  RandomStream(std::uint64_t seed, StreamTag tag, std::uint32_t replication = 0, std::uint32_t block = 0)
      : RandomStream(StreamKey{seed, tag, replication, block}) {}

  std::uint32_t next_u32() {
    if (pos_ == 4) refill();
    return buffer_[pos_++];
  }

  std::uint64_t next_u64() {
    const std::uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform on [0, 1).
  double uniform() {
    const std::uint32_t hi = next_u32();
    return uniform_from_bits(hi, next_u32());
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }

  const StreamKey& key() const { return key_; }

 private:
  void refill() {
    buffer_ = Philox4x32::generate(key_.counter(index_++), philox_key_);
    pos_ = 0;
  }

  StreamKey key_;
  Philox4x32::Key philox_key_;
  std::uint64_t index_ = 0;
  Philox4x32::Counter buffer_{};
  int pos_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace mfclt
