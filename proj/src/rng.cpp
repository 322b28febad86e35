#include "pser/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace pser {

namespace {

uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

uint64_t mix_seed(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b) {
  uint64_t x = seed ^ fnv1a(tag);
  splitmix64(x);
  x ^= 0x9e3779b97f4a7c15ULL * (a + 1);
  splitmix64(x);
  x ^= 0xc2b2ae3d27d4eb4fULL * (b + 1);
  return splitmix64(x);
}

RngStream::RngStream(uint64_t seed) : state_(seed) {
  // Avoid the all-zero fixed point and decorrelate small seeds.
  splitmix64(state_);
}

RngStream::RngStream(uint64_t seed, std::string_view tag, uint64_t a, uint64_t b)
    : RngStream(mix_seed(seed, tag, a, b)) {}

uint64_t RngStream::bits() { return splitmix64(state_); }

double RngStream::uniform() {
  return static_cast<double>(bits() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RngStream::normal() {
  // Box-Muller; u clamped away from 0 so log() is finite.
  double u = uniform();
  if (u < 1e-300) u = 1e-300;
  double v = uniform();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

double RngStream::normal(double mu, double sigma) { return mu + sigma * normal(); }

int RngStream::uniform_int(int n) {
  if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
  uint64_t un = static_cast<uint64_t>(n);
  uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x;
  do {
    x = bits();
  } while (x >= limit);
  return static_cast<int>(x % un);
}

}  // namespace pser
