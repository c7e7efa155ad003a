#include "latentid/counterfactual.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "latentid/errors.hpp"

namespace latentid {

int ConceptPairSet::n_pairs() const {
  int total = 0;
  for (const auto& c : concepts) total += c.n_pairs();
  return total;
}

void ConceptPairSet::validate() const {
  if (dim < 1) throw ModelError("embeddings: dim must be positive");
  if (concepts.empty()) throw ModelError("embeddings: no concepts");
  std::set<std::string> names;
  for (const auto& c : concepts) {
    if (!names.insert(c.name).second) throw ModelError("embeddings: duplicate concept name '" + c.name + "'");
    if (c.rows.rows() == 0) throw ModelError("embeddings: concept '" + c.name + "' has no pairs");
    if (c.rows.rows() % 2 != 0) throw ModelError("embeddings: concept '" + c.name + "' has an odd row count");
    if (c.rows.cols() != dim) throw ModelError("embeddings: concept '" + c.name + "' has the wrong dimension");
    if (!c.rows.allFinite()) throw ModelError("embeddings: concept '" + c.name + "' has non-finite values");
  }
}

namespace {

void to_little_endian(std::span<std::uint32_t> words) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& w : words) w = __builtin_bswap32(w);
  }
}

}  // namespace

ConceptPairSet load_embeddings(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw LoadError(manifest_path.string() + ": cannot open");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }

  ConceptPairSet set;
  try {
    set.dim = manifest.at("dim").get<int>();
    if (set.dim < 1) throw LoadError(manifest_path.string() + ": dim must be positive");
    for (const auto& entry : manifest.at("concepts")) {
      Concept c;
      c.name = entry.at("name").get<std::string>();
      c.file = entry.at("file").get<std::string>();
      const int n_pairs = entry.at("n_pairs").get<int>();
      const auto blob_path = dir / c.file;
      if (n_pairs < 1) throw LoadError(blob_path.string() + ": concept '" + c.name + "' declares no pairs");
      const auto n_values = static_cast<std::uintmax_t>(2) * static_cast<std::uintmax_t>(n_pairs) *
                            static_cast<std::uintmax_t>(set.dim);
      std::error_code ec;
      const auto bytes = std::filesystem::file_size(blob_path, ec);
      if (ec) throw LoadError(blob_path.string() + ": cannot stat blob");
      if (bytes != n_values * 4) {
        throw LoadError(blob_path.string() + ": " + std::to_string(bytes) + " bytes, expected 2*" +
                        std::to_string(n_pairs) + "*" + std::to_string(set.dim) + "*4 = " +
                        std::to_string(n_values * 4));
      }
      std::vector<std::uint32_t> words(static_cast<std::size_t>(n_values));
      std::ifstream blob(blob_path, std::ios::binary);
      blob.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
      if (!blob) throw LoadError(blob_path.string() + ": short read");
      to_little_endian(words);
      c.rows.resize(2 * n_pairs, set.dim);
      std::memcpy(c.rows.data(), words.data(), static_cast<std::size_t>(bytes));
      if (!c.rows.allFinite()) throw LoadError(blob_path.string() + ": contains NaN or infinite values");
      set.concepts.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  try {
    set.validate();
  } catch (const ModelError& e) {
    throw LoadError(manifest_path.string() + ": " + e.what());
  }
  return set;
}

void write_embeddings(const ConceptPairSet& set, const std::filesystem::path& dir) {
  set.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["dim"] = set.dim;
  manifest["concepts"] = nlohmann::json::array();
  for (std::size_t j = 0; j < set.concepts.size(); ++j) {
    const auto& c = set.concepts[j];
    const std::string file = c.file.empty() ? "concept_" + std::to_string(j) + ".bin" : c.file;
    manifest["concepts"].push_back({{"name", c.name}, {"n_pairs", c.n_pairs()}, {"file", file}});
    std::vector<std::uint32_t> words(static_cast<std::size_t>(c.rows.size()));
    std::memcpy(words.data(), c.rows.data(), words.size() * 4);
    to_little_endian(words);
    std::ofstream blob(dir / file, std::ios::binary | std::ios::trunc);
    blob.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 4));
    if (!blob) throw LoadError((dir / file).string() + ": write failed");
  }
  std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
}

PairDifferences pair_differences(const ConceptPairSet& set) {
  set.validate();
  PairDifferences out;
  out.diffs.resize(set.n_pairs(), set.dim);
  Eigen::Index row = 0;
  for (std::size_t j = 0; j < set.concepts.size(); ++j) {
    const auto& rows = set.concepts[j].rows;
    for (Eigen::Index p = 0; p < rows.rows() / 2; ++p) {
      out.diffs.row(row++) = (rows.row(2 * p + 1) - rows.row(2 * p)).cast<double>();
      out.concept_of_row.push_back(static_cast<int>(j));
    }
  }
  return out;
}

ConceptMatrix build_concept_matrix(const ConceptPairSet& set, DifferenceAveraging averaging) {
  const auto pd = pair_differences(set);
  ConceptMatrix out;
  out.A_s = Eigen::MatrixXd::Zero(set.n_concepts(), set.dim);
  out.row_norms.resize(set.n_concepts());
  for (Eigen::Index r = 0; r < pd.diffs.rows(); ++r) {
    Eigen::RowVectorXd d = pd.diffs.row(r);
    if (averaging == DifferenceAveraging::normalize_then_mean) {
      const double norm = d.norm();
      if (norm > 0.0) d /= norm;
    }
    out.A_s.row(pd.concept_of_row[static_cast<std::size_t>(r)]) += d;
  }
  for (int j = 0; j < set.n_concepts(); ++j) {
    const auto& c = set.concepts[static_cast<std::size_t>(j)];
    out.A_s.row(j) /= c.n_pairs();
    const double norm = out.A_s.row(j).norm();
    const double scale = std::max(1.0, c.rows.cast<double>().cwiseAbs().maxCoeff());
    if (!(norm > 1e-12 * scale)) {
      throw ModelError("build_concept_matrix: concept '" + c.name + "' has a zero mean pair difference");
    }
    out.row_norms(j) = norm;
    out.A_s.row(j) /= norm;
  }
  return out;
}

ProbeMatrix fit_concept_probe(const ConceptPairSet& set, ConceptProbeMode mode, const ProbeOptions& opts) {
  if (set.n_concepts() < 2) throw ParameterError("fit_concept_probe: need at least 2 concepts");
  ProbeMatrix out;
  out.mode = mode;
  Eigen::MatrixXd raw(set.dim, set.n_concepts());
  if (mode == ConceptProbeMode::concept_identity) {
    const auto pd = pair_differences(set);
    const auto fit = fit_multinomial(pd.diffs, pd.concept_of_row, set.n_concepts(), opts);
    raw = fit.W.transpose();
    out.train_accuracy = fit.train_accuracy;
    out.iterations = fit.iterations;
    out.converged = fit.converged;
    if (!fit.converged) {
      out.warnings.push_back("multinomial probe stopped after " + std::to_string(fit.iterations) +
                             " iterations without converging");
    }
  } else {
    double acc_sum = 0.0;
    for (int j = 0; j < set.n_concepts(); ++j) {
      const auto& c = set.concepts[static_cast<std::size_t>(j)];
      const Eigen::MatrixXd X = c.rows.cast<double>();
      LabelMatrix y(X.rows(), 1);
      for (Eigen::Index r = 0; r < X.rows(); ++r) y(r, 0) = static_cast<std::uint8_t>(r % 2);
      const auto res = fit_probe(X, y, X, y, opts);
      raw.col(j) = res.weights.W.row(0).transpose();
      acc_sum += res.accuracy;
    }
    out.train_accuracy = acc_sum / set.n_concepts();
  }
  out.column_norms.resize(set.n_concepts());
  out.W_s = raw;
  for (int j = 0; j < set.n_concepts(); ++j) {
    const double norm = raw.col(j).norm();
    if (norm == 0.0) {
      throw ModelError("fit_concept_probe: concept '" + set.concepts[static_cast<std::size_t>(j)].name +
                       "' has an all-zero probe column");
    }
    out.column_norms(j) = norm;
    out.W_s.col(j) /= norm;
  }
  return out;
}

IdentityReport product_report(const ConceptMatrix& A, const ProbeMatrix& W) {
  if (A.A_s.cols() != W.W_s.rows() || A.A_s.rows() != W.W_s.cols()) {
    throw ParameterError("product_report: A_s is " + std::to_string(A.A_s.rows()) + "x" +
                         std::to_string(A.A_s.cols()) + ", W_s is " + std::to_string(W.W_s.rows()) + "x" +
                         std::to_string(W.W_s.cols()));
  }
  return summarize_product(A.A_s * W.W_s);
}

namespace {

constexpr std::array<ReferenceConcept, 27> kReferenceConcepts{{
    {"verb => 3pSg", 32},
    {"verb => Ving", 31},
    {"verb => Ved", 47},
    {"Ving => 3pSg", 27},
    {"Ving => Ved", 34},
    {"3pSg => Ved", 29},
    {"verb => V + able", 6},
    {"verb => V + er", 14},
    {"verb => V + tion", 8},
    {"verb => V + ment", 11},
    {"adj => un + adj", 5},
    {"adj => adj + ly", 18},
    {"small => big", 20},
    {"thing => color", 21},
    {"thing => part", 13},
    {"country => capital", 15},
    {"pronoun => possessive", 4},
    {"male => female", 11},
    {"lower => upper", 34},
    {"noun => plural", 63},
    {"adj => comparative", 19},
    {"adj => superlative", 9},
    {"frequent => infrequent", 32},
    {"English => French", 46},
    {"French => German", 35},
    {"French => Spanish", 35},
    {"German => Spanish", 22},
}};

}  // namespace

std::span<const ReferenceConcept> reference_concepts() { return kReferenceConcepts; }

ConceptPairSet synthetic_pair_set(std::span<const ReferenceConcept> concepts, int dim, double noise,
                                  std::uint64_t seed) {
  if (concepts.empty()) throw ParameterError("synthetic_pair_set: no concepts");
  if (dim < static_cast<int>(concepts.size())) {
    throw ParameterError("synthetic_pair_set: dim must be at least the number of concepts");
  }
  if (!(noise >= 0.0)) throw ParameterError("synthetic_pair_set: noise must be >= 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> scale(1.0, 2.0);
  ConceptPairSet set;
  set.dim = dim;
  for (std::size_t j = 0; j < concepts.size(); ++j) {
    if (concepts[j].n_pairs < 1) throw ParameterError("synthetic_pair_set: concept without pairs");
    Concept c;
    c.name = concepts[j].name;
    c.file = "concept_" + std::to_string(j) + ".bin";
    c.rows.resize(2 * concepts[j].n_pairs, dim);
    const double s = scale(rng);
    for (int p = 0; p < concepts[j].n_pairs; ++p) {
      for (int k = 0; k < dim; ++k) {
        const double a = gauss(rng);
        double b = a + noise * gauss(rng);
        if (k == static_cast<int>(j)) b += s;
        c.rows(2 * p, k) = static_cast<float>(a);
        c.rows(2 * p + 1, k) = static_cast<float>(b);
      }
    }
    set.concepts.push_back(std::move(c));
  }
  return set;
}

}  // namespace latentid
