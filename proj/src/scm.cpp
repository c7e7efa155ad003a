#include "latentid/scm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "latentid/errors.hpp"

namespace latentid {

std::vector<int> Dag::parents(int node) const {
  std::vector<int> out;
  for (const auto& [p, c] : edges) {
    if (c == node) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void Dag::validate() const {
  if (n_nodes < 1) throw ModelError("dag: n_nodes must be positive");
  if (static_cast<int>(topo_order.size()) != n_nodes) {
    throw ModelError("dag: topo_order length differs from n_nodes");
  }
  std::vector<int> position(static_cast<std::size_t>(n_nodes), -1);
  for (int i = 0; i < n_nodes; ++i) {
    const int v = topo_order[static_cast<std::size_t>(i)];
    if (v < 0 || v >= n_nodes || position[static_cast<std::size_t>(v)] != -1) {
      throw ModelError("dag: topo_order is not a permutation");
    }
    position[static_cast<std::size_t>(v)] = i;
  }
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto [p, c] = edges[e];
    if (p < 0 || c < 0 || p >= n_nodes || c >= n_nodes) throw ModelError("dag: edge out of range");
    if (p == c) throw ModelError("dag: self-loop");
    if (position[static_cast<std::size_t>(p)] >= position[static_cast<std::size_t>(c)]) {
      throw ModelError("dag: edge violates topological order");
    }
    if (e > 0 && edges[e - 1] == edges[e]) throw ModelError("dag: duplicate edge");
  }
}

Dag gen_dag(int n_nodes, const GraphSpec& spec, std::uint64_t seed) {
  if (n_nodes < 1) throw ParameterError("gen_dag: n_nodes must be >= 1");
  Dag dag;
  dag.n_nodes = n_nodes;
  dag.topo_order.resize(static_cast<std::size_t>(n_nodes));
  std::iota(dag.topo_order.begin(), dag.topo_order.end(), 0);

  if (spec.kind == GraphSpec::Kind::chain) {
    for (int i = 0; i + 1 < n_nodes; ++i) dag.edges.emplace_back(i, i + 1);
    return dag;
  }

  if (!(spec.k > 0.0) || !std::isfinite(spec.k)) {
    throw ParameterError("gen_dag: ER expected degree k must be positive and finite");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(dag.topo_order.begin(), dag.topo_order.end(), rng);
  const double candidates = 0.5 * n_nodes * (n_nodes - 1);
  if (candidates == 0.0) return dag;
  const double p_edge = std::min(1.0, spec.k * n_nodes / candidates);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int a = 0; a < n_nodes; ++a) {
    for (int b = a + 1; b < n_nodes; ++b) {
      if (unif(rng) < p_edge) {
        dag.edges.emplace_back(dag.topo_order[static_cast<std::size_t>(a)],
                               dag.topo_order[static_cast<std::size_t>(b)]);
      }
    }
  }
  std::sort(dag.edges.begin(), dag.edges.end());
  return dag;
}

std::size_t CpdSet::n_parameters() const {
  std::size_t total = 0;
  for (const auto& n : nodes) total += n.table.size();
  return total;
}

void CpdSet::check_complete_for(const Dag& dag) const {
  if (static_cast<int>(nodes.size()) != dag.n_nodes) {
    throw ModelError("cpds: expected " + std::to_string(dag.n_nodes) + " node tables, got " +
                     std::to_string(nodes.size()));
  }
  for (int v = 0; v < dag.n_nodes; ++v) {
    const auto& cpd = nodes[static_cast<std::size_t>(v)];
    if (cpd.node != v) throw ModelError("cpds: table order does not match node index");
    if (cpd.parents != dag.parents(v)) {
      throw ModelError("cpds: parent list of node " + std::to_string(v) + " disagrees with dag");
    }
    const std::size_t expected = std::size_t{1} << cpd.parents.size();
    if (cpd.table.size() != expected) {
      throw ModelError("cpds: node " + std::to_string(v) + " is missing parent-configuration entries");
    }
    for (double p : cpd.table) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw ModelError("cpds: node " + std::to_string(v) + " has a probability outside [0,1]");
      }
    }
  }
}

CpdSet sample_cpds(const Dag& dag, double lo, double hi, std::uint64_t seed) {
  if (!(lo >= 0.0 && lo < hi && hi <= 1.0)) {
    throw ParameterError("sample_cpds: need 0 <= lo < hi <= 1");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(lo, hi);
  CpdSet set;
  set.nodes.resize(static_cast<std::size_t>(dag.n_nodes));
  for (int v = 0; v < dag.n_nodes; ++v) {
    auto& cpd = set.nodes[static_cast<std::size_t>(v)];
    cpd.node = v;
    cpd.parents = dag.parents(v);
    cpd.table.resize(std::size_t{1} << cpd.parents.size());
    for (double& p : cpd.table) p = unif(rng);
  }
  return set;
}

namespace {

std::size_t parent_config(const NodeCpd& cpd, std::uint32_t config) {
  std::size_t idx = 0;
  for (std::size_t k = 0; k < cpd.parents.size(); ++k) {
    if ((config >> cpd.parents[k]) & 1u) idx |= (std::size_t{1} << k);
  }
  return idx;
}

}  // namespace

LatentDataset ancestral_sample(const Dag& dag, const CpdSet& cpds, std::size_t n_samples,
                               std::uint64_t seed) {
  dag.validate();
  cpds.check_complete_for(dag);
  if (dag.n_nodes > 32) throw CapacityError("ancestral_sample: at most 32 latent nodes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  LatentDataset out;
  out.n_latent = dag.n_nodes;
  out.configs.resize(n_samples);
  for (auto& config : out.configs) {
    std::uint32_t c = 0;
    for (int v : dag.topo_order) {
      const auto& cpd = cpds.nodes[static_cast<std::size_t>(v)];
      if (unif(rng) < cpd.table[parent_config(cpd, c)]) c |= (1u << v);
    }
    config = c;
  }
  return out;
}

JointTable enumerate_joint(const Dag& dag, const CpdSet& cpds, int cap) {
  if (dag.n_nodes > cap || dag.n_nodes > kMaxEnumerableLatents) {
    throw CapacityError("enumerate_joint: " + std::to_string(dag.n_nodes) +
                        " latent nodes exceeds the enumeration cap of " +
                        std::to_string(std::min(cap, kMaxEnumerableLatents)));
  }
  dag.validate();
  cpds.check_complete_for(dag);
  const std::uint32_t n_configs = 1u << dag.n_nodes;
  JointTable joint(n_configs, 1.0);
  for (std::uint32_t c = 0; c < n_configs; ++c) {
    double p = 1.0;
    for (int v : dag.topo_order) {
      const auto& cpd = cpds.nodes[static_cast<std::size_t>(v)];
      const double on = cpd.table[parent_config(cpd, c)];
      p *= bit_of(c, v) ? on : 1.0 - on;
    }
    joint[c] = p;
  }
  return joint;
}

LatentModel make_latent_model(int n_nodes, const GraphSpec& spec, double lo, double hi,
                              std::uint64_t seed) {
  LatentModel m;
  m.dag = gen_dag(n_nodes, spec, derive_seed(seed, 1));
  m.cpds = sample_cpds(m.dag, lo, hi, derive_seed(seed, 2));
  return m;
}

void to_json(nlohmann::json& j, const LatentModel& m) {
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [p, c] : m.dag.edges) edges.push_back({p, c});
  nlohmann::json cpds = nlohmann::json::array();
  for (const auto& n : m.cpds.nodes) {
    cpds.push_back({{"node", n.node}, {"parents", n.parents}, {"table", n.table}});
  }
  j = {{"n_nodes", m.dag.n_nodes},
       {"edges", edges},
       {"topo_order", m.dag.topo_order},
       {"cpds", cpds}};
}

void from_json(const nlohmann::json& j, LatentModel& m) {
  m.dag.n_nodes = j.at("n_nodes").get<int>();
  m.dag.edges.clear();
  for (const auto& e : j.at("edges")) m.dag.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  std::sort(m.dag.edges.begin(), m.dag.edges.end());
  m.dag.topo_order = j.at("topo_order").get<std::vector<int>>();
  m.cpds.nodes.clear();
  for (const auto& n : j.at("cpds")) {
    NodeCpd cpd;
    cpd.node = n.at("node").get<int>();
    cpd.parents = n.at("parents").get<std::vector<int>>();
    cpd.table = n.at("table").get<std::vector<double>>();
    m.cpds.nodes.push_back(std::move(cpd));
  }
  std::sort(m.cpds.nodes.begin(), m.cpds.nodes.end(),
            [](const NodeCpd& a, const NodeCpd& b) { return a.node < b.node; });
  m.dag.validate();
  m.cpds.check_complete_for(m.dag);
}

}  // namespace latentid
