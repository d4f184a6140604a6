#pragma once

#include <cstdint>

namespace kdlab {

// splitmix64 mix of (seed, stream). Every consumer of randomness draws from
// its own derived stream so adding a consumer never shifts another's draws.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace kdlab
