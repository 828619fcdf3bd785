#include "mdcap/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace mdcap {

uint64_t Rng::uniform_below(uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::uniform_below: n must be > 0");
  // Rejection sampling over the largest multiple of n.
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  // u1 in (0, 1] so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double Rng::truncated_normal(double stddev, double cut) {
  for (;;) {
    const double x = normal() * stddev;
    if (x >= -cut && x <= cut) return x;
  }
}

uint64_t fnv1a(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace mdcap
