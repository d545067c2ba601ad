#pragma once

#include <cstdint>
#include <random>

namespace pttt {

// Deterministic random source. Wraps std::mt19937_64 (whose output stream is
// specified by the standard) but implements every distribution draw itself,
// because the std:: distribution objects are implementation-defined and would
// break run reproducibility across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  // Unbiased integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound);

  int index(int bound) { return static_cast<int>(below(static_cast<std::uint64_t>(bound))); }

  // Uniform double in [0, 1) with 53 bits of entropy.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform double in (0, 1]; safe as a log() argument.
  double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the spare value is cached.
  double normal();

  // Gamma(shape, 1) via Marsaglia-Tsang, extended to shape < 1.
  double gamma(double shape);

  // Beta(a, b) as Ga/(Ga+Gb).
  double beta(double a, double b);

  // Fisher-Yates over [first, last).
  template <class It>
  void shuffle(It first, It last) {
    auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::swap(first[i - 1], first[below(i)]);
    }
  }

  std::uint64_t draws() const { return draws_; }

  // Stream derivation for independent substreams (splitmix64 finalizer).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix(mix(a, b), c);
  }

 private:
  std::mt19937_64 engine_;
  std::uint64_t draws_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pttt
