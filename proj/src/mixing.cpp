#include "latentid/mixing.hpp"

#include <algorithm>
#include <numeric>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>

#include "latentid/errors.hpp"

namespace latentid {

void MixingMap::validate() const {
  if (n_latent < 1 || n_latent > kMaxEnumerableLatents) {
    throw ParameterError("mixing: n_latent must be in [1, " + std::to_string(kMaxEnumerableLatents) + "]");
  }
  const std::size_t n_configs = std::size_t{1} << n_latent;
  for (const auto& perm : permutations) {
    if (perm.size() != n_configs) throw ModelError("mixing: permutation has wrong length");
    std::vector<char> seen(n_configs, 0);
    for (auto v : perm) {
      if (v >= n_configs || seen[v]) throw ModelError("mixing: permutation is not a bijection");
      seen[v] = 1;
    }
  }
  std::set<std::pair<int, int>> unique;
  for (const auto& ob : selected) {
    if (ob.perm < 0 || ob.perm >= n_perms() || ob.bit < 0 || ob.bit >= n_latent) {
      throw ModelError("mixing: selected bit out of range");
    }
    if (!unique.emplace(ob.perm, ob.bit).second) throw ModelError("mixing: duplicate selected bit");
  }
}

MixingMap MixingMap::identity(int n_latent) {
  MixingMap m;
  m.n_latent = n_latent;
  std::vector<std::uint32_t> perm(std::size_t{1} << n_latent);
  std::iota(perm.begin(), perm.end(), 0u);
  m.permutations.push_back(std::move(perm));
  for (int b = 0; b < n_latent; ++b) m.selected.push_back({0, b});
  m.validate();
  return m;
}

MixingMap build_mixing(int n_latent, int n_perms, std::uint64_t seed) {
  if (n_latent < 1 || n_latent > kMaxEnumerableLatents) {
    throw ParameterError("build_mixing: n_latent must be in [1, " +
                         std::to_string(kMaxEnumerableLatents) + "]");
  }
  if (n_perms < 1) throw ParameterError("build_mixing: n_perms must be >= 1");
  std::mt19937_64 rng(seed);
  MixingMap m;
  m.n_latent = n_latent;
  for (int j = 0; j < n_perms; ++j) {
    std::vector<std::uint32_t> perm(std::size_t{1} << n_latent);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    m.permutations.push_back(std::move(perm));
    for (int b = 0; b < n_latent; ++b) m.selected.push_back({j, b});
  }
  return m;
}

Bits apply_mixing_index(const MixingMap& map, std::uint32_t config_index) {
  Bits x(map.selected.size());
  for (std::size_t k = 0; k < map.selected.size(); ++k) {
    const auto& ob = map.selected[k];
    const std::uint32_t permuted = map.permutations[static_cast<std::size_t>(ob.perm)][config_index];
    x[k] = static_cast<std::uint8_t>((permuted >> ob.bit) & 1u);
  }
  return x;
}

Bits apply_mixing(const MixingMap& map, std::span<const std::uint8_t> config) {
  if (static_cast<int>(config.size()) != map.n_latent) {
    throw ParameterError("apply_mixing: config length " + std::to_string(config.size()) +
                         " != n_latent " + std::to_string(map.n_latent));
  }
  return apply_mixing_index(map, config_to_index(config));
}

MixingMap select_observed(const MixingMap& map, std::span<const int> indices) {
  if (indices.empty()) throw ParameterError("select_observed: empty selection");
  MixingMap out;
  out.n_latent = map.n_latent;
  out.permutations = map.permutations;
  std::set<int> seen;
  for (int i : indices) {
    if (i < 0 || i >= map.n_observed()) throw ParameterError("select_observed: index out of range");
    if (!seen.insert(i).second) throw ParameterError("select_observed: duplicate index");
    out.selected.push_back(map.selected[static_cast<std::size_t>(i)]);
  }
  return out;
}

std::vector<int> nested_schedule(const MixingMap& map, std::uint64_t seed) {
  std::vector<int> order(map.selected.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

MaskedInput mask_block(std::span<const std::uint8_t> observed, std::span<const int> positions) {
  const int m = static_cast<int>(observed.size());
  if (positions.empty()) throw ParameterError("mask: no masked positions");
  if (positions.size() > 16) throw ParameterError("mask: block targets are limited to 16 bits");
  MaskedInput out;
  out.visible.assign(observed.begin(), observed.end());
  out.mask_indicator.assign(observed.size(), 0);
  for (std::size_t k = 0; k < positions.size(); ++k) {
    const int pos = positions[k];
    if (pos < 0 || pos >= m) {
      throw ParameterError("mask: position " + std::to_string(pos) + " outside [0, " +
                           std::to_string(m) + ")");
    }
    if (out.mask_indicator[static_cast<std::size_t>(pos)]) throw ParameterError("mask: repeated position");
    out.mask_indicator[static_cast<std::size_t>(pos)] = 1;
    out.visible[static_cast<std::size_t>(pos)] = 0;
    if (observed[static_cast<std::size_t>(pos)]) out.target |= (1 << k);
    out.masked_positions.push_back(pos);
  }
  return out;
}

MaskedInput mask_sample(std::span<const std::uint8_t> observed, int mask_pos) {
  const int pos[1] = {mask_pos};
  return mask_block(observed, pos);
}

MaskedInput mask_sample(std::span<const std::uint8_t> observed, std::mt19937_64& rng) {
  if (observed.empty()) throw ParameterError("mask: empty observed vector");
  std::uniform_int_distribution<int> pick(0, static_cast<int>(observed.size()) - 1);
  return mask_sample(observed, pick(rng));
}

Bits restore_observed(const MaskedInput& masked) {
  Bits out = masked.visible;
  for (std::size_t k = 0; k < masked.masked_positions.size(); ++k) {
    out[static_cast<std::size_t>(masked.masked_positions[k])] =
        static_cast<std::uint8_t>((masked.target >> k) & 1);
  }
  return out;
}

ObservedDataset make_observed_dataset(const MixingMap& map, std::span<const std::uint32_t> configs) {
  ObservedDataset d;
  d.n_latent = map.n_latent;
  d.m = map.n_observed();
  d.latent.reserve(configs.size());
  d.observed.reserve(configs.size());
  for (auto c : configs) {
    d.latent.push_back(index_to_config(c, map.n_latent));
    d.observed.push_back(apply_mixing_index(map, c));
  }
  return d;
}

void write_dataset_csv(std::ostream& os, const ObservedDataset& data) {
  os << "n_latent,m,n_samples\n" << data.n_latent << ',' << data.m << ',' << data.size() << '\n';
  for (int i = 0; i < data.n_latent; ++i) os << (i ? "," : "") << "c_" << i;
  for (int j = 0; j < data.m; ++j) os << ",x_" << j;
  os << '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (int i = 0; i < data.n_latent; ++i) os << (i ? "," : "") << int(data.latent[r][static_cast<std::size_t>(i)]);
    for (int j = 0; j < data.m; ++j) os << ',' << int(data.observed[r][static_cast<std::size_t>(j)]);
    os << '\n';
  }
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

}  // namespace

ObservedDataset read_dataset_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "n_latent,m,n_samples") {
    throw LoadError("dataset: first line must be 'n_latent,m,n_samples'");
  }
  if (!std::getline(is, line)) throw LoadError("dataset: missing shape line");
  const auto shape = split_csv(line);
  if (shape.size() != 3) throw LoadError("dataset: malformed shape line");
  ObservedDataset d;
  std::size_t n_samples = 0;
  try {
    d.n_latent = std::stoi(shape[0]);
    d.m = std::stoi(shape[1]);
    n_samples = std::stoul(shape[2]);
  } catch (const std::exception&) {
    throw LoadError("dataset: non-numeric shape line");
  }
  if (d.n_latent < 1 || d.m < 1) throw LoadError("dataset: n_latent and m must be positive");
  if (!std::getline(is, line)) throw LoadError("dataset: missing column header");
  const auto width = static_cast<std::size_t>(d.n_latent + d.m);
  if (split_csv(line).size() != width) throw LoadError("dataset: column header does not match n_latent + m");
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != width) {
      throw LoadError("dataset: row " + std::to_string(d.size() + 1) + " has " + std::to_string(cells.size()) +
                      " fields, expected " + std::to_string(width));
    }
    Bits c(static_cast<std::size_t>(d.n_latent));
    Bits x(static_cast<std::size_t>(d.m));
    for (std::size_t k = 0; k < width; ++k) {
      if (cells[k] != "0" && cells[k] != "1") throw LoadError("dataset: non-binary value '" + cells[k] + "'");
      const auto bit = static_cast<std::uint8_t>(cells[k] == "1");
      if (k < c.size()) {
        c[k] = bit;
      } else {
        x[k - c.size()] = bit;
      }
    }
    d.latent.push_back(std::move(c));
    d.observed.push_back(std::move(x));
  }
  if (d.size() != n_samples) {
    throw LoadError("dataset: shape line says " + std::to_string(n_samples) + " samples, found " +
                    std::to_string(d.size()));
  }
  return d;
}

void to_json(nlohmann::json& j, const MixingMap& m) {
  nlohmann::json sel = nlohmann::json::array();
  for (const auto& ob : m.selected) sel.push_back({ob.perm, ob.bit});
  j = {{"n_latent", m.n_latent}, {"permutations", m.permutations}, {"selected_bits", sel}};
}

void from_json(const nlohmann::json& j, MixingMap& m) {
  m.n_latent = j.at("n_latent").get<int>();
  m.permutations = j.at("permutations").get<std::vector<std::vector<std::uint32_t>>>();
  m.selected.clear();
  for (const auto& s : j.at("selected_bits")) m.selected.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  m.validate();
}

}  // namespace latentid
