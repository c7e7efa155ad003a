#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "latentid/probe.hpp"

namespace latentid {

using EmbeddingRows = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Concept {
  std::string name;
  std::string file;    // blob file name inside the embedding directory
  EmbeddingRows rows;  // 2 * n_pairs x dim: pair0_a, pair0_b, pair1_a, ...

  int n_pairs() const { return static_cast<int>(rows.rows() / 2); }
};

// Embedding directory: manifest.json = {dim, concepts: [{name, n_pairs, file}]}
// and one blob per concept of raw little-endian float32, row-major, no header.
struct ConceptPairSet {
  int dim = 0;
  std::vector<Concept> concepts;

  int n_concepts() const { return static_cast<int>(concepts.size()); }
  int n_pairs() const;
  void validate() const;
};

ConceptPairSet load_embeddings(const std::filesystem::path& dir);
void write_embeddings(const ConceptPairSet& set, const std::filesystem::path& dir);

// Per-pair differences b - a stacked over all concepts (sum of n_pairs rows)
// with the owning concept index per row.
struct PairDifferences {
  Eigen::MatrixXd diffs;
  std::vector<int> concept_of_row;
};
PairDifferences pair_differences(const ConceptPairSet& set);

struct ConceptMatrix {
  Eigen::MatrixXd A_s;        // n_concepts x dim, unit rows
  Eigen::VectorXd row_norms;  // before normalization
};

enum class DifferenceAveraging {
  mean_then_normalize,
  normalize_then_mean,
};

// Row j is the normalized average pair difference of concept j. Throws
// ModelError naming the concept when that average vanishes.
ConceptMatrix build_concept_matrix(const ConceptPairSet& set,
                                   DifferenceAveraging averaging = DifferenceAveraging::mean_then_normalize);

enum class ConceptProbeMode {
  // One softmax classifier over all pair differences, label = concept index.
  concept_identity,
  // Per concept, a binary classifier separating the a and b members.
  binary_endpoints,
};

struct ProbeMatrix {
  Eigen::MatrixXd W_s;  // dim x n_concepts, unit columns
  Eigen::VectorXd column_norms;
  ConceptProbeMode mode = ConceptProbeMode::concept_identity;
  double train_accuracy = 0.0;
  int iterations = 0;
  bool converged = true;
  std::vector<std::string> warnings;
};

ProbeMatrix fit_concept_probe(const ConceptPairSet& set,
                              ConceptProbeMode mode = ConceptProbeMode::concept_identity,
                              const ProbeOptions& opts = {});

// product = A_s * W_s with the identity diagnostics of probe::summarize_product.
IdentityReport product_report(const ConceptMatrix& A, const ProbeMatrix& W);

struct ReferenceConcept {
  const char* name;
  int n_pairs;
};

// The 27 counterfactual concepts and their pair counts (641 pairs in all).
std::span<const ReferenceConcept> reference_concepts();

// Idealized set: pair a is a random Gaussian point, b = a + s_j e_j + noise,
// with s_j drawn from [1, 2] and isotropic noise of standard deviation
// `noise`. Requires dim >= number of concepts.
ConceptPairSet synthetic_pair_set(std::span<const ReferenceConcept> concepts, int dim, double noise,
                                  std::uint64_t seed);

}  // namespace latentid
