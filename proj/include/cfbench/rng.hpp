#pragma once

// mt19937_64 with hand-rolled variate transforms. The std:: distribution
// objects are implementation-defined, so seeded runs would not reproduce
// across standard libraries; these do.

#include <cmath>
#include <cstdint>
#include <random>

namespace cfbench {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() {
    return double(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t uniform_index(std::uint64_t n) {
    // Modulo bias is negligible for n << 2^64.
    return eng_() % n;
  }

  // Standard normal, Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  // Derive an independent stream, e.g. one per subject.
  Rng fork(std::uint64_t salt) {
    return Rng(eng_() ^ (salt * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull));
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace cfbench
