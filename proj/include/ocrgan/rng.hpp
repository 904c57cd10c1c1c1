#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace ocrgan {

/// Seeded generator with platform-independent draws. The standard
/// distributions are implementation-defined, so sampling is done here from raw
/// engine output; a given seed yields the same stream on every toolchain.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : Rng(seed, {}) {}

  /// Independent stream keyed by the run seed plus a stream path, e.g.
  /// `Rng(seed, {kForgeStream, step})`.
  Rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
    std::vector<std::uint32_t> words;
    auto push = [&](std::uint64_t v) {
      words.push_back(static_cast<std::uint32_t>(v));
      words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto s : stream) push(s);
    std::seed_seq seq(words.begin(), words.end());
    engine_.seed(seq);
  }

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in the closed range [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<std::int64_t>(engine_());
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % span;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return lo + static_cast<std::int64_t>(r % span);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p = 0.5) { return uniform() < p; }
  std::uint64_t next_u64() { return engine_(); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::int64_t>(last - first);
    for (std::int64_t i = n - 1; i > 0; --i) std::swap(first[i], first[uniform_int(0, i)]);
  }

 private:
  std::mt19937_64 engine_;
};

/// Stream identifiers for `Rng(seed, {stream, ...})`.
enum RngStream : std::uint64_t {
  kInitStream = 1,
  kShuffleStream = 2,
  kForgeStream = 3,
  kSyntheticStream = 4,
};

}  // namespace ocrgan
