#pragma once

#include <cstdint>
#include <string_view>

namespace mdcap {

// Counter-based SplitMix64 generator. Streams are derived from a master seed
// plus a stream id and an index, so any consumer (data generation, init,
// corruption, Monte-Carlo scoring, ...) can be re-created from scratch at any
// step without serializing generator state. Adding a new stream id never
// perturbs the draws of existing streams.
class Rng {
 public:
  Rng() = default;
  explicit Rng(uint64_t state) : state_(state) {}

  // Named sub-streams of a master seed.
  enum Stream : uint64_t {
    kScene = 1,
    kNegatives = 2,
    kParamInit = 3,
    kTimeSample = 4,
    kCorruption = 5,
    kBatchSampler = 6,
    kMonteCarlo = 7,
    kProbe = 8,
    kEval = 9,
    kGeneric = 10,
  };

  static uint64_t mix(uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static Rng stream(uint64_t master, uint64_t stream_id, uint64_t index = 0) {
    uint64_t s = mix(master);
    s = mix(s ^ mix(stream_id));
    s = mix(s ^ mix(index));
    return Rng(s);
  }

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n), n > 0.
  uint64_t uniform_below(uint64_t n);

  // Standard normal via Box-Muller. Two draws per call, no cached spare, so
  // the call sequence alone determines the output.
  double normal();

  // Normal(0, stddev) re-drawn until within [-cut, cut].
  double truncated_normal(double stddev, double cut);

 private:
  uint64_t state_ = 0;
};

// FNV-1a over a byte string; used for config and vocabulary fingerprints.
uint64_t fnv1a(std::string_view bytes);

}  // namespace mdcap
