#pragma once

// Deterministic random streams. Every stochastic routine in this library keys
// an independent stream from (seed, salt) pairs, so results are reproducible
// bit for bit across runs and across worker counts: parallel code assigns one
// stream per work item (replica, vertex, ...) instead of sharing a generator.
//
// The generator is splitmix64 (Steele/Lea/Vigna). Eight bytes of state per
// stream matters: the event-driven dynamics keeps one stream per tree vertex.

#include <cmath>
#include <cstdint>

namespace treeq {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t x) {
  std::uint64_t s = x;
  return splitmix64_next(s);
}

// Key derivation: replica i of a run seeded s draws from derive_key(s, i), the
// per-vertex stream of a coupling driver keyed k is derive_key(k, v), and so
// on. Published so that runs can be reproduced outside this codebase.
inline std::uint64_t derive_key(std::uint64_t seed, std::uint64_t salt) {
  return mix64(mix64(seed) ^ (salt + 0x9e3779b97f4a7c15ULL));
}

class Stream {
 public:
  Stream() : state_(0) {}
  explicit Stream(std::uint64_t key) : state_(key) {}

  std::uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform on [0,1), 53 random bits.
  double next_unit() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0,1]; safe as a log argument.
  double next_unit_pos() { return double((next_u64() >> 11) + 1) * 0x1.0p-53; }

  double next_exp() { return -std::log(next_unit_pos()); }

  bool next_bernoulli(double p) { return next_unit() < p; }

  // Standard normal via Box-Muller (one value per call, second discarded;
  // only used for optimizer restarts where speed is irrelevant).
  double next_normal() {
    double u = next_unit_pos();
    double v = next_unit();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(6.283185307179586 * v);
  }

 private:
  std::uint64_t state_;
};

}  // namespace treeq
