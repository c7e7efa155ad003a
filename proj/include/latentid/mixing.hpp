#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentid/bits.hpp"

namespace latentid {

// One observed coordinate: bit `bit` of permutation `perm` applied to the
// configuration index.
struct ObservedBit {
  int perm = 0;
  int bit = 0;
  friend bool operator==(const ObservedBit&, const ObservedBit&) = default;
};

// c -> x: configuration index, pushed through K permutations of {0..2^n-1},
// each permuted index decoded back into n bits; x is the selected subset of
// those K*n bits.
struct MixingMap {
  int n_latent = 0;
  std::vector<std::vector<std::uint32_t>> permutations;
  std::vector<ObservedBit> selected;

  int n_observed() const { return static_cast<int>(selected.size()); }
  int n_perms() const { return static_cast<int>(permutations.size()); }
  void validate() const;

  // Single identity permutation, all n bits selected: x == c.
  static MixingMap identity(int n_latent);
};

MixingMap build_mixing(int n_latent, int n_perms, std::uint64_t seed);

Bits apply_mixing(const MixingMap& map, std::span<const std::uint8_t> config);
Bits apply_mixing_index(const MixingMap& map, std::uint32_t config_index);

// Keeps selected[indices[0]], selected[indices[1]], ... in that order.
MixingMap select_observed(const MixingMap& map, std::span<const int> indices);

// Random ordering of the current selection; prefixes give nested subsets.
std::vector<int> nested_schedule(const MixingMap& map, std::uint64_t seed);

// Masked view of an observed vector. The single-bit task masks one
// coordinate and the target is that bit; the block task masks several and
// the target is their joint value sum_k x[pos_k] * 2^k.
struct MaskedInput {
  Bits visible;         // masked coordinates zeroed
  Bits mask_indicator;  // 1 exactly at masked coordinates
  std::vector<int> masked_positions;
  int target = 0;

  int mask_pos() const { return masked_positions.front(); }
  int n_classes() const { return 1 << masked_positions.size(); }
};

MaskedInput mask_sample(std::span<const std::uint8_t> observed, int mask_pos);
MaskedInput mask_block(std::span<const std::uint8_t> observed, std::span<const int> positions);
MaskedInput mask_sample(std::span<const std::uint8_t> observed, std::mt19937_64& rng);

// Inverse of masking: visible with the target written back.
Bits restore_observed(const MaskedInput& masked);

// Latent configurations with their observed vectors.
struct ObservedDataset {
  int n_latent = 0;
  int m = 0;
  std::vector<Bits> latent;
  std::vector<Bits> observed;

  std::size_t size() const { return latent.size(); }
};

ObservedDataset make_observed_dataset(const MixingMap& map, std::span<const std::uint32_t> configs);

// Line 1 names the shape fields (n_latent,m,n_samples), line 2 holds their
// values, line 3 the column names c_0..c_{n-1},x_0..x_{m-1}, then one row
// per sample.
void write_dataset_csv(std::ostream& os, const ObservedDataset& data);
ObservedDataset read_dataset_csv(std::istream& is);

void to_json(nlohmann::json& j, const MixingMap& m);
void from_json(const nlohmann::json& j, MixingMap& m);

}  // namespace latentid
