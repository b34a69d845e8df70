#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace flood {

/// SplitMix64 generator.
///
/// State advances by the golden-ratio increment 0x9E3779B97F4A7C15 and each
/// output is the finalizer
///   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///   z ^= z >> 31
/// The u64 stream is bit-identical on every platform. Uniform doubles take the
/// top 53 bits. Gaussian draws use Box-Muller over two uniforms and cache the
/// second value of each pair.
class Rng {
public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0) : state_{seed} {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Independent generator keyed by (seed, key). Used for positional noise:
  /// the stream for a key never depends on how many draws other keys made.
  static Rng keyed(std::uint64_t seed, std::uint64_t key) {
    return Rng{mix(seed + kGolden) ^ mix(key * kGolden + 0x632BE59BD9B4E019ULL)};
  }

  Rng fork(std::uint64_t key) const { return keyed(state_, key); }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform(); // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  /// Full generator state, including a cached Gaussian, for checkpointing.
  struct Snapshot {
    std::uint64_t state;
    double spare;
    bool has_spare;
  };

  Snapshot snapshot() const { return {state_, spare_, has_spare_}; }

  static Rng restore(const Snapshot& s) {
    Rng r(s.state);
    r.spare_ = s.spare;
    r.has_spare_ = s.has_spare;
    return r;
  }

  std::uint64_t state() const { return state_; }

private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

} // namespace flood
