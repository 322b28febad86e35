#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace pser {

// Seed mixing for named sub-streams. All randomness in the project flows from
// one user seed; components draw from streams derived by tag (and optional
// indices) so that re-running a stage in isolation reproduces its draws.
uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0);

// Deterministic generator with hand-rolled distributions. std::* distributions
// are implementation-defined, so everything here is spelled out.
class RngStream {
 public:
  explicit RngStream(uint64_t seed);
  RngStream(uint64_t seed, std::string_view tag, uint64_t a = 0, uint64_t b = 0);

  uint64_t bits();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);      // [lo, hi)
  double normal();                           // standard normal, Box-Muller
  double normal(double mu, double sigma);
  int uniform_int(int n);                    // [0, n), unbiased

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
      std::swap(v[i], v[uniform_int(i + 1)]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace pser
