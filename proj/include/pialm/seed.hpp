#pragma once

#include <cstdint>
#include <initializer_list>

namespace pialm {

// splitmix64 finalizer.
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed and a path of indices.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t z = splitmix64(seed);
  for (std::uint64_t p : path) z = splitmix64(z ^ splitmix64(p + 0x632be59bd9b4e019ULL));
  return z;
}

}  // namespace pialm
