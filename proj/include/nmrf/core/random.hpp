#pragma once

#include <cstdint>
#include <random>

namespace nmrf {

// splitmix64; used to derive independent sub-seeds from (seed, stream, step)
// so that resuming a run never has to serialize engine state.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t step = 0) {
  return mix64(mix64(seed ^ 0x6a09e667f3bcc908ull) ^ mix64(stream + 0xbb67ae8584caa73bull) ^
               mix64(step + 0x3c6ef372fe94f82bull));
}

inline std::mt19937_64 make_engine(std::uint64_t seed, std::uint64_t stream, std::uint64_t step = 0) {
  return std::mt19937_64(derive_seed(seed, stream, step));
}

}  // namespace nmrf
