#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "latentid/errors.hpp"
#include "latentid/experiment.hpp"
#include "latentid/mixing.hpp"
#include "latentid/oracle.hpp"
#include "latentid/predictor.hpp"
#include "latentid/probe.hpp"
#include "latentid/scm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace latentid;

namespace {

struct Globals {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool parallel = false;
  int threads = 0;
};

ExperimentConfig base_config(const Globals& g) {
  ExperimentConfig cfg;
  if (!g.config.empty()) cfg = load_config(g.config);
  if (g.seed) cfg.seeds = {*g.seed};
  if (g.parallel) cfg.parallel = true;
  if (g.threads > 0) cfg.threads = g.threads;
  if (!g.out.empty()) cfg.output_dir = g.out;
  validate(cfg);
  return cfg;
}

fs::path out_dir(const Globals& g, const std::string& fallback) {
  fs::path p = g.out.empty() ? fs::path(fallback) : fs::path(g.out);
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw LoadError("cannot open " + p.string());
  return json::parse(is);
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

GenerativeModel load_generative(const fs::path& dir) {
  return GenerativeModel(read_json(dir / "model.json").get<LatentModel>(),
                         read_json(dir / "mixing.json").get<MixingMap>());
}

ObservedDataset load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "dataset.csv");
  if (!is) throw LoadError("cannot open " + (dir / "dataset.csv").string());
  return read_dataset_csv(is);
}

struct GenOptions {
  std::optional<int> n_latent;
  std::optional<std::string> graph;
  std::optional<double> k;
  std::optional<int> n_perms;
  std::optional<int> m;
  std::optional<int> n_samples;
};

int cmd_gen(const Globals& g, const GenOptions& o) {
  const auto cfg = base_config(g);
  const std::uint64_t seed = cfg.seeds.front();
  const int n = o.n_latent.value_or(cfg.n_latent);
  GraphSpec graph = cfg.graph;
  if (o.graph) graph = *o.graph == "chain" ? GraphSpec::chain() : GraphSpec::er(o.k.value_or(graph.k));
  if (o.graph && *o.graph != "chain" && *o.graph != "er") throw ConfigError("--graph", "expected chain or er");
  const int n_perms = o.n_perms.value_or(cfg.n_perms > 0 ? cfg.n_perms : (1 << n));

  const auto latent = make_latent_model(n, graph, cfg.cpd_low, cfg.cpd_high, derive_seed(seed, 101));
  const auto pool = build_mixing(n, n_perms, derive_seed(seed, 102));
  const auto schedule = nested_schedule(pool, derive_seed(seed, 103));
  const int m = o.m.value_or(cfg.observed_sizes.empty() ? pool.n_observed() : cfg.observed_sizes.back());
  if (m < 1 || m > pool.n_observed()) throw ConfigError("--m", "must lie in [1, " + std::to_string(pool.n_observed()) + "]");
  const std::vector<int> prefix(schedule.begin(), schedule.begin() + m);
  const auto mixing = select_observed(pool, prefix);
  const auto samples = ancestral_sample(latent.dag, latent.cpds,
                                        static_cast<std::size_t>(o.n_samples.value_or(cfg.n_train)),
                                        derive_seed(seed, 104));

  const auto dir = out_dir(g, "runs/gen");
  write_json(dir / "model.json", latent);
  write_json(dir / "mixing.json", mixing);
  auto os = open_out(dir / "dataset.csv");
  write_dataset_csv(os, make_observed_dataset(mixing, samples.configs));
  std::cout << "wrote " << samples.size() << " samples (n=" << n << ", m=" << m << ") to " << dir.string() << '\n';
  return 0;
}

int cmd_oracle(const Globals& g, const std::string& in) {
  const auto gm = load_generative(in);
  const auto dir = out_dir(g, in);
  PosteriorTable prior{PosteriorKind::prior, gm.prior()};
  auto prior_os = open_out(dir / "prior.csv");
  write_posterior_csv(prior_os, prior);

  std::vector<int> schedule(static_cast<std::size_t>(gm.n_observed()));
  std::iota(schedule.begin(), schedule.end(), 0);
  std::vector<int> sizes;
  for (int s = 1; s <= gm.n_observed(); ++s) sizes.push_back(s);
  const auto sweep = jensen_gap_sweep(gm, schedule, sizes);
  auto sweep_os = open_out(dir / "gap_sweep.csv");
  write_gap_sweep_csv(sweep_os, sweep);

  write_json(dir / "oracle.json", {{"n_latent", gm.n_latent()},
                                   {"n_observed", gm.n_observed()},
                                   {"H_c_given_x", conditional_entropy(gm)}});
  std::cout << "H(c|x) = " << conditional_entropy(gm) << " bits over " << gm.n_observed() << " observed bits\n";
  return 0;
}

MaskedDataset masked_rows(const ObservedDataset& data, std::mt19937_64* rng) {
  MaskedDataset out;
  out.input_dim = data.m;
  out.n_classes = 2;
  for (const auto& x : data.observed) out.add(rng ? mask_sample(x, *rng) : mask_sample(x, 0));
  return out;
}

int cmd_train(const Globals& g, const std::string& in, std::optional<int> epochs) {
  const auto cfg = base_config(g);
  const std::uint64_t seed = cfg.seeds.front();
  const auto data = load_dataset(in);
  std::mt19937_64 rng(derive_seed(seed, 106));
  const auto train_set = masked_rows(data, &rng);

  PredictorConfig pc = cfg.predictor;
  pc.input_dim = data.m;
  pc.n_classes = 2;
  if (pc.feature_dim == 0) pc.feature_dim = std::max(64, 1 << data.n_latent);
  auto model = init_model(pc, derive_seed(seed, 107));
  TrainHyper hyper = cfg.train;
  if (epochs) hyper.epochs = *epochs;
  hyper.seed = derive_seed(seed, 108);
  const auto report = train(model, train_set, hyper);

  const auto dir = out_dir(g, "runs/train");
  model.save(dir / "checkpoint", &hyper);
  write_json(dir / "train_report.json", report);
  std::cout << "final loss " << report.loss_trace.back() << ", train accuracy " << report.final_train_accuracy
            << '\n';
  return 0;
}

int cmd_probe(const Globals& g, const std::string& in, const std::string& checkpoint) {
  const auto cfg = base_config(g);
  const auto gm = load_generative(in);
  const auto data = load_dataset(in);
  auto model = PredictorModel::load(checkpoint);
  model.set_mode(PredictorModel::Mode::eval);
  if (model.config().input_dim != data.m) throw LoadError("probe: checkpoint input_dim does not match the dataset");

  const auto eval_set = masked_rows(data, nullptr);
  const Eigen::MatrixXd F = model.forward_all(eval_set).features.transpose();
  const auto n_rows = static_cast<Eigen::Index>(data.size());
  const Eigen::Index half = n_rows / 2;
  if (half < 2) throw ParameterError("probe: need at least 4 samples");
  const int n = data.n_latent;
  const auto n_configs = static_cast<Eigen::Index>(gm.n_configs());

  LabelMatrix Y(n_rows, n);
  Eigen::MatrixXd L(n_rows, n_configs);
  for (Eigen::Index r = 0; r < n_rows; ++r) {
    const auto& c = data.latent[static_cast<std::size_t>(r)];
    for (int i = 0; i < n; ++i) Y(r, i) = c[static_cast<std::size_t>(i)];
    const auto post = posterior_c_given_x(gm, mask_sample(data.observed[static_cast<std::size_t>(r)], 0));
    for (Eigen::Index k = 0; k < n_configs; ++k) L(r, k) = post.probs[static_cast<std::size_t>(k)];
  }
  L = clipped_log(L);

  const auto probe = fit_probe(F.topRows(half), Y.topRows(half), F.bottomRows(n_rows - half),
                               Y.bottomRows(n_rows - half), cfg.probe);
  const auto affine = fit_affine(F.topRows(half), L.topRows(half), F.bottomRows(n_rows - half),
                                 L.bottomRows(n_rows - half));

  const auto dir = out_dir(g, "runs/probe");
  auto fos = open_out(dir / "features.csv");
  write_features_csv(fos, F.transpose());
  write_json(dir / "probe_report.json", {{"probe_acc", probe.accuracy},
                                         {"probe_joint_acc", probe.joint_accuracy},
                                         {"per_variable_accuracy", probe.per_variable_accuracy},
                                         {"affine_r2", affine.mean_r_squared},
                                         {"affine_degenerate", affine.degenerate},
                                         {"effective_rank", affine.effective_rank}});
  std::cout << "probe accuracy " << probe.accuracy << ", affine R^2 " << affine.mean_r_squared << '\n';
  return 0;
}

int cmd_experiment(const Globals& g, std::optional<ExperimentKind> force, const std::string& embeddings) {
  auto cfg = base_config(g);
  if (force) cfg.kind = *force;
  if (!embeddings.empty()) cfg.embeddings_dir = embeddings;
  validate(cfg);
  const auto outcome = run_experiment(cfg, cfg.output_dir, &std::cerr);
  std::cout << outcome.summary.dump(2) << '\n';
  return 0;
}

int cmd_validate(const Globals& g) {
  if (g.config.empty()) throw ConfigError("--config", "a config file is required");
  base_config(g);
  std::cout << "ok\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-concept identifiability experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Experiment config (JSON)");
  app.add_option("--out", g.out, "Output directory");
  app.add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) { g.seed = s; }, "Seed (overrides config seeds)");
  app.add_flag("--parallel", g.parallel, "Run seeds on worker threads");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

  GenOptions gen;
  auto* gen_cmd = app.add_subcommand("gen", "Sample a latent model, mixing map and observed dataset");
  gen_cmd->add_option_function<int>("--n-latent", [&](int v) { gen.n_latent = v; });
  gen_cmd->add_option_function<std::string>("--graph", [&](const std::string& v) { gen.graph = v; }, "chain or er");
  gen_cmd->add_option_function<double>("--k", [&](double v) { gen.k = v; }, "ER expected edges per node");
  gen_cmd->add_option_function<int>("--n-perms", [&](int v) { gen.n_perms = v; });
  gen_cmd->add_option_function<int>("--m", [&](int v) { gen.m = v; }, "Observed coordinates kept");
  gen_cmd->add_option_function<int>("--n-samples", [&](int v) { gen.n_samples = v; });

  std::string in;
  auto* oracle_cmd = app.add_subcommand("oracle", "Exact prior, entropy and Jensen-gap sweep of a generated model");
  oracle_cmd->add_option("--in", in, "Directory written by gen")->required();

  std::optional<int> epochs;
  auto* train_cmd = app.add_subcommand("train", "Train the masked-bit predictor on a generated dataset");
  train_cmd->add_option("--in", in, "Directory written by gen")->required();
  train_cmd->add_option_function<int>("--epochs", [&](int v) { epochs = v; });

  std::string checkpoint;
  auto* probe_cmd = app.add_subcommand("probe", "Linear probe and affine fit on a trained checkpoint");
  probe_cmd->add_option("--in", in, "Directory written by gen")->required();
  probe_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

  auto* identity_cmd = app.add_subcommand("identity", "Block-target identity check with random baseline");
  std::string embeddings;
  auto* cf_cmd = app.add_subcommand("counterfactual", "Concept-difference x probe product on an embedding directory");
  cf_cmd->add_option("--embeddings", embeddings, "Embedding directory; the synthetic set when omitted");
  auto* run_cmd = app.add_subcommand("run", "Run the configured experiment");
  auto* validate_cmd = app.add_subcommand("validate", "Check a config without running it");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen_cmd) return cmd_gen(g, gen);
    if (*oracle_cmd) return cmd_oracle(g, in);
    if (*train_cmd) return cmd_train(g, in, epochs);
    if (*probe_cmd) return cmd_probe(g, in, checkpoint);
    if (*identity_cmd) return cmd_experiment(g, ExperimentKind::identity_check, "");
    if (*cf_cmd) return cmd_experiment(g, ExperimentKind::counterfactual, embeddings);
    if (*run_cmd) return cmd_experiment(g, std::nullopt, "");
    if (*validate_cmd) return cmd_validate(g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
