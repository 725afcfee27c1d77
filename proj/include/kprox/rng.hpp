#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace kprox {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for a named stream. Every random consumer (per-sample init, per-epoch
/// shuffle, ...) draws from its own stream so that scheduling cannot perturb
/// results.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view stream,
                                 std::uint64_t index = 0)
{
  return splitmix64(splitmix64(master ^ fnv1a(stream)) + splitmix64(index));
}

inline Rng make_rng(std::uint64_t master, std::string_view stream,
                    std::uint64_t index = 0)
{
  return Rng(derive_seed(master, stream, index));
}

} // namespace kprox
