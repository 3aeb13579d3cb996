#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace glmask {

/// SplitMix64 finalizer; used to derive independent seeds from (seed, tag).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Named stream identifiers used to derive separate RNG streams from one seed.
enum class Stream : std::uint64_t {
  kData = 0x64617461,
  kDropout = 0x64726f70,
  kClean = 0x636c6e,
  kInit = 0x696e6974,
  kNoise = 0x6e6f6973,
  kSplit = 0x73706c74,
  kCipher = 0x63697068,
};

/// Thin wrapper over mt19937_64 with distribution code that is fixed here
/// rather than left to the standard library, so streams are reproducible
/// across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0)
      : engine_(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(stream)), index)) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace glmask
