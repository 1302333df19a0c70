#pragma once

#include <cmath>
#include <cstdint>

namespace omg {

// splitmix64-based generator with hand-rolled distributions so that byte
// streams are identical across standard libraries and platforms.
// stream(seed, id) yields an independent sequence per id; per-sample
// streams can therefore be drawn in any order (or in parallel) with
// output identical to the sequential order.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  static uint64_t mix(uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static Rng stream(uint64_t seed, uint64_t stream_id) {
    return Rng(mix(mix(seed) ^ mix(stream_id ^ 0xd1b54a32d192ed03ull)));
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Box-Muller; second value of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // [0, n), unbiased
  int uniform_int(int n) {
    uint64_t bound = ~uint64_t(0) - ~uint64_t(0) % uint64_t(n);
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= bound);
    return static_cast<int>(v % uint64_t(n));
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace omg
