#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>

#include "npp/errors.hpp"

namespace npp {

/// Deterministic random source. Raw mt19937_64 output is mapped to floats
/// by hand so that identical seeds give identical streams on every platform
/// and standard library. All randomness in the project flows through this
/// class; nothing uses std::uniform_*_distribution.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses modulo reduction; the bias is below
  /// 2^-50 for any n this project draws.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw domain_error("uniform_int: n must be positive");
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  /// Standard normal via Box-Muller. Consumes two uniforms per call and
  /// keeps no spare, so the generator state alone captures the stream.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    // Guard log(0); pushes u1 to the smallest representable draw instead.
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Serializes engine state as the standard decimal token stream.
  std::string save_state() const {
    std::ostringstream os;
    os << gen_;
    return os.str();
  }

  void load_state(const std::string& state) {
    std::istringstream is(state);
    is >> gen_;
    if (is.fail()) throw format_error("rng: malformed state string");
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace npp
