#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace tdaens {

// Counter-based randomness. Every random draw in the library is a pure
// function of a structured key, so results never depend on evaluation order
// or on how work is split across threads.

std::uint64_t mix64(std::uint64_t x);

/// Folds a tuple of integers into a single key.
std::uint64_t hash_key(std::initializer_list<std::uint64_t> parts);

/// FNV-1a, used to fold names (layer names, tags) into keys.
std::uint64_t hash_string(std::string_view s);

/// Uniform in [0, 1) with 53 bits of resolution.
double uniform01(std::uint64_t key);

/// Standard normal via Box-Muller on two uniforms derived from `key`.
double standard_normal(std::uint64_t key);

/// Both Box-Muller outputs for `key`.
void standard_normal_pair(std::uint64_t key, double& z0, double& z1);

/// Sequential stream over a fixed key: draw k is a function of (key, k).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  std::uint64_t next_u64() { return mix64(key_ ^ mix64(counter_++ + 0x9e3779b97f4a7c15ULL)); }
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double normal();
  /// Uniform integer in [0, n), rejection-sampled so there is no modulo bias.
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Fisher-Yates permutation of 0..n-1 driven by `key`.
std::vector<std::size_t> permutation(std::size_t n, std::uint64_t key);

}  // namespace tdaens
