#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace latentid {

using Bits = std::vector<std::uint8_t>;

// Exact enumeration over 2^n configurations is limited to n <= this.
inline constexpr int kMaxEnumerableLatents = 16;

// Configuration (c_0, ..., c_{n-1}) <-> sum c_i * 2^i. Node 0 is the least
// significant bit everywhere in the library.
inline std::uint32_t config_to_index(std::span<const std::uint8_t> config) {
  std::uint32_t idx = 0;
  for (std::size_t i = 0; i < config.size(); ++i) {
    if (config[i]) idx |= (1u << i);
  }
  return idx;
}

inline Bits index_to_config(std::uint32_t idx, int n) {
  Bits out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = (idx >> i) & 1u;
  return out;
}

inline int bit_of(std::uint32_t idx, int i) { return static_cast<int>((idx >> i) & 1u); }

// SplitMix64 finalizer; used to derive independent RNG streams from one seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace latentid
