#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "latentid/counterfactual.hpp"
#include "latentid/predictor.hpp"
#include "latentid/probe.hpp"
#include "latentid/scm.hpp"

namespace latentid {

enum class ExperimentKind { invertibility_sweep, er_sweep, identity_check, counterfactual };

struct Thresholds {
  double min_full_accuracy = 0.95;   // invertibility sweep, largest m
  double monotone_tolerance = 0.02;  // allowed drop of aggregate accuracy between sizes
  double min_cell_accuracy = 0.90;   // every ER grid cell
  double min_full_r2 = 0.9;
  double min_dominance = 3.0;
  double min_concept_cosine = 0.9;
  double min_steering_rate = 0.9;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::invertibility_sweep;

  int n_latent = 3;
  GraphSpec graph = GraphSpec::chain();
  double cpd_low = kDefaultCpdLow;
  double cpd_high = kDefaultCpdHigh;
  // er_sweep grid
  std::vector<int> n_latent_grid{4, 5, 6};
  std::vector<double> er_k_grid{1.0, 2.0, 3.0};

  int n_perms = 0;                  // 0: 2^n_latent
  std::vector<int> observed_sizes{1, 2, 3, 6, 12, 24};  // nested prefixes of the schedule; empty: full pool

  int n_train = 20000;
  int n_test = 5000;
  PredictorConfig predictor{.feature_dim = 0};  // input_dim and n_classes are set per run; feature_dim 0 = max(64, 2^n)
  TrainHyper train;           // seed is derived per run
  ProbeOptions probe;

  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int baseline_draws = 1000;

  // counterfactual: an embedding directory, or the synthetic idealized set when empty
  std::string embeddings_dir;
  int synthetic_dim = 64;
  double synthetic_noise = 0.1;
  std::uint64_t synthetic_seed = 0;
  ConceptProbeMode concept_probe = ConceptProbeMode::concept_identity;
  DifferenceAveraging averaging = DifferenceAveraging::mean_then_normalize;

  Thresholds thresholds;
  std::string output_dir = "runs/out";
  bool parallel = false;
  int threads = 1;
};

std::string to_string(ExperimentKind kind);

// Throws ConfigError naming the offending field.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& cfg);
// Fully materialized config, every default spelled out.
nlohmann::json resolved_json(const ExperimentConfig& cfg);

int resolved_perms(const ExperimentConfig& cfg, int n_latent);

struct RunSpec {
  GraphSpec graph;
  int n_latent = 3;
  std::uint64_t seed = 0;
  int m = 0;  // observed coordinates; 0: full pool
};

std::string graph_label(const GraphSpec& g);

struct RunRecord {
  std::string cell;
  int n_latent = 0;
  std::uint64_t seed = 0;
  int m = 0;
  double H_c_given_x = 0.0;
  double probe_acc = 0.0;
  double probe_joint_acc = 0.0;
  double affine_r2 = 0.0;
  bool affine_degenerate = false;
  int row_argmax_hits = 0;
  int identity_dim = 0;
  double dominance_ratio = std::numeric_limits<double>::quiet_NaN();
  double train_accuracy = 0.0;
  double final_loss = 0.0;
  // Linear-direction checks on the per-variable marginal representation;
  // NaN when the features carry no variation.
  double concept_cosine_min = std::numeric_limits<double>::quiet_NaN();
  double steering_hit_rate = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
  std::string error;
  double seconds = 0.0;
};

// The whole single-masked-bit pipeline for one (graph, n, seed, m): sample,
// train, extract features at a fixed evaluation mask, probe, affine fit,
// identity and steering diagnostics.
RunRecord run_masked_bit(const ExperimentConfig& cfg, const RunSpec& spec);

struct BlockIdentityRun {
  RunRecord record;
  IdentityReport report;
  int diversity_rank = 0;
};

// Trains on a categorical target equal to the joint value of one
// permutation's n bits (2^n classes) and checks probe x affine ~ identity.
BlockIdentityRun run_block_identity(const ExperimentConfig& cfg, std::uint64_t seed);

struct BaselineStats {
  double pooled_dominance = 0.0;  // mean diag |.| over mean off-diagonal |.|, pooled over draws
  double mean_dominance = 0.0;
  double mean_hits = 0.0;
  int draws = 0;
};

// Independent Gaussian A (d x l) and W (l x d) through identity_check.
BaselineStats random_identity_baseline(int feature_dim, int dim, int draws, std::uint64_t seed);

struct CounterfactualRun {
  ConceptMatrix A;
  ProbeMatrix W;
  IdentityReport report;
  std::vector<std::string> names;
};

CounterfactualRun run_counterfactual(const ConceptPairSet& set, const ExperimentConfig& cfg);

inline constexpr const char* kRunsHeader = "seed,m,H_c_given_x,probe_acc,affine_r2,row_argmax_hits,dominance_ratio";

void write_runs_csv(std::ostream& os, std::span<const RunRecord> runs);
nlohmann::json to_json(const RunRecord& r);
nlohmann::json to_json(const IdentityReport& r);

struct ExperimentOutcome {
  nlohmann::json summary;
  bool all_passed = false;
};

// Runs the configured experiment and writes its artifacts into `out_dir`.
// Progress lines go to `log` when non-null.
ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                 std::ostream* log = nullptr);

// Sweeps over `specs`, sequentially or on cfg.threads workers; the result
// order matches `specs` either way.
std::vector<RunRecord> run_all(const ExperimentConfig& cfg, std::span<const RunSpec> specs,
                               std::ostream* log = nullptr);

}  // namespace latentid
