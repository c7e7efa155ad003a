#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "latentid/bits.hpp"

namespace latentid {

struct Dag {
  int n_nodes = 0;
  std::vector<std::pair<int, int>> edges;  // (parent, child), sorted
  std::vector<int> topo_order;

  // Parents of `node` in ascending index order. The k-th parent is bit k of
  // the node's parent-configuration index.
  std::vector<int> parents(int node) const;
  void validate() const;
};

struct GraphSpec {
  enum class Kind { chain, er };
  Kind kind = Kind::chain;
  double k = 1.0;  // expected edges per node, ER only

  static GraphSpec chain() { return {Kind::chain, 1.0}; }
  static GraphSpec er(double k) { return {Kind::er, k}; }
};

// Chain: 0 -> 1 -> ... -> n-1. ER: random node ordering, then each of the
// n(n-1)/2 forward pairs kept independently with probability
// min(1, k*n / (n(n-1)/2)).
Dag gen_dag(int n_nodes, const GraphSpec& spec, std::uint64_t seed);

struct NodeCpd {
  int node = 0;
  std::vector<int> parents;
  std::vector<double> table;  // P(node = 1 | parent config), 2^|parents| entries
};

struct CpdSet {
  std::vector<NodeCpd> nodes;  // indexed by node

  std::size_t n_parameters() const;
  // Throws ModelError if any node or parent configuration is missing.
  void check_complete_for(const Dag& dag) const;
};

inline constexpr double kDefaultCpdLow = 0.2;
inline constexpr double kDefaultCpdHigh = 0.8;

CpdSet sample_cpds(const Dag& dag, double lo, double hi, std::uint64_t seed);

struct LatentDataset {
  int n_latent = 0;
  std::vector<std::uint32_t> configs;  // one packed configuration per sample

  std::size_t size() const { return configs.size(); }
  Bits sample(std::size_t i) const { return index_to_config(configs[i], n_latent); }
};

LatentDataset ancestral_sample(const Dag& dag, const CpdSet& cpds, std::size_t n_samples,
                               std::uint64_t seed);

// p(c) over all 2^n configurations.
using JointTable = std::vector<double>;

JointTable enumerate_joint(const Dag& dag, const CpdSet& cpds,
                           int cap = kMaxEnumerableLatents);

struct LatentModel {
  Dag dag;
  CpdSet cpds;

  int n_latent() const { return dag.n_nodes; }
};

LatentModel make_latent_model(int n_nodes, const GraphSpec& spec, double lo, double hi,
                              std::uint64_t seed);

void to_json(nlohmann::json& j, const LatentModel& m);
void from_json(const nlohmann::json& j, LatentModel& m);

}  // namespace latentid
