#include "tdaens/rng.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

namespace tdaens {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_key(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243f6a8885a308d3ULL ^ parts.size();
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p));
  return h;
}

std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double uniform01(std::uint64_t key) { return static_cast<double>(mix64(key) >> 11) * 0x1.0p-53; }

void standard_normal_pair(std::uint64_t key, double& z0, double& z1) {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = static_cast<double>((mix64(key ^ 0x5851f42d4c957f2dULL) >> 11) + 1) * 0x1.0p-53;
  const double u2 = static_cast<double>(mix64(key ^ 0x14057b7ef767814fULL) >> 11) * 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  z0 = r * std::cos(theta);
  z1 = r * std::sin(theta);
}

double standard_normal(std::uint64_t key) {
  double z0, z1;
  standard_normal_pair(key, z0, z1);
  return z0;
}

double CounterRng::normal() { return standard_normal(next_u64()); }

std::uint64_t CounterRng::below(std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

std::vector<std::size_t> permutation(std::size_t n, std::uint64_t key) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  CounterRng rng(key);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

}  // namespace tdaens
