#include "latentid/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <type_traits>

#include "latentid/errors.hpp"
#include "latentid/mixing.hpp"
#include "latentid/oracle.hpp"

namespace latentid {

using nlohmann::json;

std::string to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::invertibility_sweep: return "invertibility_sweep";
    case ExperimentKind::er_sweep: return "er_sweep";
    case ExperimentKind::identity_check: return "identity_check";
    case ExperimentKind::counterfactual: return "counterfactual";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config parsing. Every accessor knows its dotted path so errors name the field.

namespace {

class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    out = convert<T>(j_.at(key), field(key));
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Reader(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  void mark(const std::string& key) { seen_.insert(key); }
  const json& raw(const std::string& key) const { return j_.at(key); }

  void reject_unknown() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError(where, "expected a number");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer()) throw ConfigError(where, "expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
            throw ConfigError(where, "expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(where, "expected true or false");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(where, "expected a string");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where, e.what());
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class T>
std::vector<T> read_list(const json& v, const std::string& where) {
  if (!v.is_array()) throw ConfigError(where, "expected a list");
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out.push_back(Reader::convert<T>(v[i], where + "[" + std::to_string(i) + "]"));
  }
  return out;
}

GraphSpec parse_graph(Reader r) {
  std::string kind = "chain";
  double k = 1.0;
  r.read("kind", kind);
  r.read("k", k);
  r.reject_unknown();
  if (kind == "chain") return GraphSpec::chain();
  if (kind == "er") return GraphSpec::er(k);
  throw ConfigError(r.field("kind"), "expected \"chain\" or \"er\", got \"" + kind + "\"");
}

ExperimentKind parse_kind(const std::string& s, const std::string& where) {
  for (auto k : {ExperimentKind::invertibility_sweep, ExperimentKind::er_sweep, ExperimentKind::identity_check,
                 ExperimentKind::counterfactual}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError(where, "unknown experiment \"" + s +
                               "\" (expected invertibility_sweep, er_sweep, identity_check or counterfactual)");
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Reader root(j, "");
  if (!root.has("experiment")) throw ConfigError("experiment", "missing");
  std::string kind;
  root.read("experiment", kind);
  cfg.kind = parse_kind(kind, "experiment");

  {
    Reader m = root.child("model");
    m.read("n_latent", cfg.n_latent);
    if (m.has("graph")) cfg.graph = parse_graph(m.child("graph"));
    m.mark("graph");
    m.mark("cpd_range");
    if (m.has("cpd_range")) {
      const auto range = read_list<double>(m.raw("cpd_range"), m.field("cpd_range"));
      if (range.size() != 2) throw ConfigError(m.field("cpd_range"), "expected [low, high]");
      cfg.cpd_low = range[0];
      cfg.cpd_high = range[1];
    }
    m.reject_unknown();
  }
  {
    Reader g = root.child("er_grid");
    g.mark("n_latent");
    g.mark("k");
    if (g.has("n_latent")) cfg.n_latent_grid = read_list<int>(g.raw("n_latent"), g.field("n_latent"));
    if (g.has("k")) cfg.er_k_grid = read_list<double>(g.raw("k"), g.field("k"));
    g.reject_unknown();
  }
  {
    Reader m = root.child("mixing");
    m.read("n_perms", cfg.n_perms);
    m.mark("observed_sizes");
    if (m.has("observed_sizes")) {
      cfg.observed_sizes = read_list<int>(m.raw("observed_sizes"), m.field("observed_sizes"));
    }
    m.reject_unknown();
  }
  {
    Reader d = root.child("data");
    d.read("n_train", cfg.n_train);
    d.read("n_test", cfg.n_test);
    d.reject_unknown();
  }
  {
    Reader p = root.child("predictor");
    p.read("embed_dim", cfg.predictor.embed_dim);
    p.read("hidden_dim", cfg.predictor.hidden_dim);
    p.read("n_layers", cfg.predictor.n_layers);
    p.read("feature_dim", cfg.predictor.feature_dim);
    p.read("use_batchnorm", cfg.predictor.use_batchnorm);
    p.reject_unknown();
  }
  {
    Reader t = root.child("train");
    t.read("lr", cfg.train.lr);
    t.read("batch_size", cfg.train.batch_size);
    t.read("epochs", cfg.train.epochs);
    t.read("beta1", cfg.train.beta1);
    t.read("beta2", cfg.train.beta2);
    t.read("adam_eps", cfg.train.adam_eps);
    t.reject_unknown();
  }
  {
    Reader p = root.child("probe");
    p.read("l2", cfg.probe.l2);
    p.read("max_iter", cfg.probe.max_iter);
    p.read("tol", cfg.probe.tol);
    p.reject_unknown();
  }
  root.mark("seeds");
  if (!root.has("seeds")) throw ConfigError("seeds", "missing (list of integer seeds)");
  cfg.seeds = read_list<std::uint64_t>(root.raw("seeds"), "seeds");
  {
    Reader i = root.child("identity");
    i.read("baseline_draws", cfg.baseline_draws);
    i.reject_unknown();
  }
  {
    Reader c = root.child("counterfactual");
    c.read("embeddings_dir", cfg.embeddings_dir);
    {
      Reader s = c.child("synthetic");
      s.read("dim", cfg.synthetic_dim);
      s.read("noise", cfg.synthetic_noise);
      s.read("seed", cfg.synthetic_seed);
      s.reject_unknown();
    }
    std::string mode = "concept_identity";
    std::string averaging = "mean_then_normalize";
    c.read("probe_mode", mode);
    c.read("averaging", averaging);
    if (mode == "concept_identity") {
      cfg.concept_probe = ConceptProbeMode::concept_identity;
    } else if (mode == "binary_endpoints") {
      cfg.concept_probe = ConceptProbeMode::binary_endpoints;
    } else {
      throw ConfigError(c.field("probe_mode"), "expected concept_identity or binary_endpoints");
    }
    if (averaging == "mean_then_normalize") {
      cfg.averaging = DifferenceAveraging::mean_then_normalize;
    } else if (averaging == "normalize_then_mean") {
      cfg.averaging = DifferenceAveraging::normalize_then_mean;
    } else {
      throw ConfigError(c.field("averaging"), "expected mean_then_normalize or normalize_then_mean");
    }
    c.reject_unknown();
  }
  {
    Reader t = root.child("thresholds");
    t.read("min_full_accuracy", cfg.thresholds.min_full_accuracy);
    t.read("monotone_tolerance", cfg.thresholds.monotone_tolerance);
    t.read("min_cell_accuracy", cfg.thresholds.min_cell_accuracy);
    t.read("min_full_r2", cfg.thresholds.min_full_r2);
    t.read("min_dominance", cfg.thresholds.min_dominance);
    t.read("min_concept_cosine", cfg.thresholds.min_concept_cosine);
    t.read("min_steering_rate", cfg.thresholds.min_steering_rate);
    t.reject_unknown();
  }
  root.read("output_dir", cfg.output_dir);
  root.read("parallel", cfg.parallel);
  root.read("threads", cfg.threads);
  root.reject_unknown();
  validate(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("<file>", path.string() + ": " + e.what());
  }
  return parse_config(j);
}

namespace {

void check_latents(int n, const std::string& where) {
  if (n < 1) throw ConfigError(where, "must be >= 1");
  if (n > kMaxEnumerableLatents) {
    throw ConfigError(where, "capacity: " + std::to_string(n) + " latents exceeds the exact-enumeration cap of " +
                                 std::to_string(kMaxEnumerableLatents));
  }
}

}  // namespace

int resolved_perms(const ExperimentConfig& cfg, int n_latent) {
  return cfg.n_perms > 0 ? cfg.n_perms : (1 << n_latent);
}

void validate(const ExperimentConfig& cfg) {
  if (cfg.seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
  if (cfg.kind == ExperimentKind::er_sweep) {
    if (cfg.n_latent_grid.empty()) throw ConfigError("er_grid.n_latent", "must not be empty");
    if (cfg.er_k_grid.empty()) throw ConfigError("er_grid.k", "must not be empty");
    for (int n : cfg.n_latent_grid) check_latents(n, "er_grid.n_latent");
    for (double k : cfg.er_k_grid) {
      if (!(k > 0.0) || !std::isfinite(k)) throw ConfigError("er_grid.k", "edge densities must be positive");
    }
  } else {
    check_latents(cfg.n_latent, "model.n_latent");
  }
  if (cfg.graph.kind == GraphSpec::Kind::er && !(cfg.graph.k > 0.0 && std::isfinite(cfg.graph.k))) {
    throw ConfigError("model.graph.k", "must be positive");
  }
  if (!(cfg.cpd_low >= 0.0 && cfg.cpd_low < cfg.cpd_high && cfg.cpd_high <= 1.0)) {
    throw ConfigError("model.cpd_range", "need 0 <= low < high <= 1");
  }
  if (cfg.n_perms < 0) throw ConfigError("mixing.n_perms", "must be >= 0 (0 selects 2^n_latent)");
  if (cfg.kind == ExperimentKind::invertibility_sweep && cfg.observed_sizes.empty()) {
    throw ConfigError("mixing.observed_sizes", "must not be empty for invertibility_sweep");
  }
  if (cfg.kind != ExperimentKind::er_sweep && cfg.kind != ExperimentKind::counterfactual) {
    const int pool = resolved_perms(cfg, cfg.n_latent) * cfg.n_latent;
    int prev = 0;
    for (int s : cfg.observed_sizes) {
      if (s < 1 || s > pool) {
        throw ConfigError("mixing.observed_sizes", "size " + std::to_string(s) + " outside [1, " +
                                                       std::to_string(pool) + "]");
      }
      if (s <= prev) throw ConfigError("mixing.observed_sizes", "sizes must be strictly increasing");
      prev = s;
    }
  }
  if (cfg.n_train < 2) throw ConfigError("data.n_train", "must be >= 2");
  if (cfg.n_test < 4) throw ConfigError("data.n_test", "must be >= 4");
  if (cfg.predictor.embed_dim < 1) throw ConfigError("predictor.embed_dim", "must be positive");
  if (cfg.predictor.hidden_dim < 1) throw ConfigError("predictor.hidden_dim", "must be positive");
  if (cfg.predictor.n_layers < 0) throw ConfigError("predictor.n_layers", "must be >= 0");
  if (cfg.predictor.feature_dim < 0) throw ConfigError("predictor.feature_dim", "must be >= 0 (0 = automatic)");
  if (!(cfg.train.lr > 0.0)) throw ConfigError("train.lr", "must be positive");
  if (cfg.train.batch_size < 2) throw ConfigError("train.batch_size", "must be >= 2");
  if (cfg.train.epochs < 1) throw ConfigError("train.epochs", "must be >= 1");
  if (!(cfg.probe.l2 >= 0.0)) throw ConfigError("probe.l2", "must be >= 0");
  if (cfg.probe.max_iter < 1) throw ConfigError("probe.max_iter", "must be >= 1");
  if (cfg.baseline_draws < 1) throw ConfigError("identity.baseline_draws", "must be >= 1");
  if (cfg.kind == ExperimentKind::counterfactual && cfg.embeddings_dir.empty()) {
    if (cfg.synthetic_dim < static_cast<int>(reference_concepts().size())) {
      throw ConfigError("counterfactual.synthetic.dim", "must be at least the number of concepts (27)");
    }
    if (!(cfg.synthetic_noise >= 0.0)) throw ConfigError("counterfactual.synthetic.noise", "must be >= 0");
  }
  if (cfg.threads < 1) throw ConfigError("threads", "must be >= 1");
}

json resolved_json(const ExperimentConfig& cfg) {
  json graph = cfg.graph.kind == GraphSpec::Kind::chain ? json{{"kind", "chain"}}
                                                        : json{{"kind", "er"}, {"k", cfg.graph.k}};
  return json{
      {"experiment", to_string(cfg.kind)},
      {"model", {{"n_latent", cfg.n_latent}, {"graph", graph}, {"cpd_range", {cfg.cpd_low, cfg.cpd_high}}}},
      {"er_grid", {{"n_latent", cfg.n_latent_grid}, {"k", cfg.er_k_grid}}},
      {"mixing", {{"n_perms", cfg.n_perms}, {"observed_sizes", cfg.observed_sizes}}},
      {"data", {{"n_train", cfg.n_train}, {"n_test", cfg.n_test}}},
      {"predictor",
       {{"embed_dim", cfg.predictor.embed_dim},
        {"hidden_dim", cfg.predictor.hidden_dim},
        {"n_layers", cfg.predictor.n_layers},
        {"feature_dim", cfg.predictor.feature_dim},
        {"use_batchnorm", cfg.predictor.use_batchnorm}}},
      {"train",
       {{"lr", cfg.train.lr},
        {"batch_size", cfg.train.batch_size},
        {"epochs", cfg.train.epochs},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"adam_eps", cfg.train.adam_eps}}},
      {"probe", {{"l2", cfg.probe.l2}, {"max_iter", cfg.probe.max_iter}, {"tol", cfg.probe.tol}}},
      {"seeds", cfg.seeds},
      {"identity", {{"baseline_draws", cfg.baseline_draws}}},
      {"counterfactual",
       {{"embeddings_dir", cfg.embeddings_dir},
        {"synthetic", {{"dim", cfg.synthetic_dim}, {"noise", cfg.synthetic_noise}, {"seed", cfg.synthetic_seed}}},
        {"probe_mode",
         cfg.concept_probe == ConceptProbeMode::concept_identity ? "concept_identity" : "binary_endpoints"},
        {"averaging",
         cfg.averaging == DifferenceAveraging::mean_then_normalize ? "mean_then_normalize" : "normalize_then_mean"}}},
      {"thresholds",
       {{"min_full_accuracy", cfg.thresholds.min_full_accuracy},
        {"monotone_tolerance", cfg.thresholds.monotone_tolerance},
        {"min_cell_accuracy", cfg.thresholds.min_cell_accuracy},
        {"min_full_r2", cfg.thresholds.min_full_r2},
        {"min_dominance", cfg.thresholds.min_dominance},
        {"min_concept_cosine", cfg.thresholds.min_concept_cosine},
        {"min_steering_rate", cfg.thresholds.min_steering_rate}}},
      {"output_dir", cfg.output_dir},
      {"parallel", cfg.parallel},
      {"threads", cfg.threads},
  };
}

std::string graph_label(const GraphSpec& g) {
  if (g.kind == GraphSpec::Kind::chain) return "chain";
  std::ostringstream os;
  os << "ER" << g.k;
  return os.str();
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

// Sub-seed streams; everything in a run derives from the run's seed alone, so
// runs that differ only in m share the model, pool, schedule and samples.
enum Stream : std::uint64_t {
  kLatentStream = 101,
  kMixingStream,
  kScheduleStream,
  kTrainSampleStream,
  kTestSampleStream,
  kMaskStream,
  kInitStream,
  kShuffleStream,
  kProbeStream,
};

struct Setting {
  LatentModel latent;
  MixingMap pool;
  std::vector<int> schedule;
};

Setting make_setting(const ExperimentConfig& cfg, const GraphSpec& graph, int n, std::uint64_t seed) {
  Setting s;
  s.latent = make_latent_model(n, graph, cfg.cpd_low, cfg.cpd_high, derive_seed(seed, kLatentStream));
  s.pool = build_mixing(n, resolved_perms(cfg, n), derive_seed(seed, kMixingStream));
  s.schedule = nested_schedule(s.pool, derive_seed(seed, kScheduleStream));
  return s;
}

PredictorConfig predictor_for(const ExperimentConfig& cfg, int n_latent, int input_dim, int n_classes) {
  PredictorConfig p = cfg.predictor;
  p.input_dim = input_dim;
  p.n_classes = n_classes;
  if (p.feature_dim == 0) p.feature_dim = std::max(64, 1 << n_latent);
  return p;
}

// Per-configuration evaluation view: features at the fixed evaluation mask,
// plus the oracle's posteriors given the same visible context.
struct ConfigView {
  Eigen::MatrixXd features;   // n_configs x d
  Eigen::MatrixXd log_post;   // n_configs x n_configs, clipped
  Eigen::MatrixXd log_marg1;  // n_configs x n, log p(c_i = 1 | x), clipped
  double H_c_given_x = 0.0;
};

ConfigView evaluate_configs(const GenerativeModel& gm, const PredictorModel& model,
                            std::span<const int> eval_mask) {
  const std::uint32_t n_configs = gm.n_configs();
  const int n = gm.n_latent();
  std::vector<MaskedInput> inputs;
  inputs.reserve(n_configs);
  for (std::uint32_t c = 0; c < n_configs; ++c) inputs.push_back(mask_block(gm.observed(c), eval_mask));
  const auto data = make_dataset(inputs, model.config().n_classes);
  ConfigView v;
  v.features = model.forward_all(data).features.transpose();

  Eigen::MatrixXd post(n_configs, n_configs);
  Eigen::MatrixXd marg = Eigen::MatrixXd::Zero(n_configs, n);
  for (std::uint32_t c = 0; c < n_configs; ++c) {
    const auto table = posterior_c_given_x(gm, inputs[c]);
    for (std::uint32_t k = 0; k < n_configs; ++k) {
      post(c, k) = table.probs[k];
      for (int i = 0; i < n; ++i) {
        if (bit_of(k, i)) marg(c, i) += table.probs[k];
      }
    }
  }
  v.log_post = clipped_log(post);
  v.log_marg1 = clipped_log(marg);
  const auto ctx = context_of(inputs.front());
  v.H_c_given_x = conditional_entropy(gm, ctx.positions);
  return v;
}

struct Split {
  std::vector<std::uint32_t> fit;
  std::vector<std::uint32_t> held;
};

Split split_configs(const LatentDataset& test) {
  Split s;
  const std::size_t half = test.size() / 2;
  s.fit.assign(test.configs.begin(), test.configs.begin() + static_cast<std::ptrdiff_t>(half));
  s.held.assign(test.configs.begin() + static_cast<std::ptrdiff_t>(half), test.configs.end());
  return s;
}

Eigen::MatrixXd gather(const Eigen::MatrixXd& per_config, std::span<const std::uint32_t> configs) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(configs.size()), per_config.cols());
  for (std::size_t i = 0; i < configs.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = per_config.row(configs[i]);
  return out;
}

LabelMatrix latent_labels(std::span<const std::uint32_t> configs, int n) {
  LabelMatrix y(static_cast<Eigen::Index>(configs.size()), n);
  for (std::size_t r = 0; r < configs.size(); ++r) {
    for (int i = 0; i < n; ++i) y(static_cast<Eigen::Index>(r), i) = static_cast<std::uint8_t>(bit_of(configs[r], i));
  }
  return y;
}

bool has_variation(const Eigen::MatrixXd& X) {
  if (X.rows() < 2) return false;
  return ((X.rowwise() - X.row(0)).cwiseAbs().maxCoeff()) > 1e-12 * std::max(1.0, X.cwiseAbs().maxCoeff());
}

// Joint-configuration softmax probe against the centered affine map.
IdentityReport joint_identity(const ConfigView& v, const Split& split, int n_configs, const ProbeOptions& opts) {
  const Eigen::MatrixXd X = gather(v.features, split.fit);
  std::vector<int> labels(split.fit.begin(), split.fit.end());
  const auto W = fit_multinomial(X, labels, n_configs, opts);
  const auto A = fit_affine(X, gather(v.log_post, split.fit), PosteriorGauge::centered);
  return identity_check(A.A, W.W);
}

void fill_identity(RunRecord& rec, const ConfigView& v, const Split& split, int n_configs, const ProbeOptions& opts) {
  rec.identity_dim = n_configs;
  try {
    const auto report = joint_identity(v, split, n_configs, opts);
    rec.row_argmax_hits = report.row_argmax_hits;
    rec.dominance_ratio = report.dominance_ratio;
  } catch (const ParameterError&) {
    rec.row_argmax_hits = 0;
    rec.dominance_ratio = std::numeric_limits<double>::quiet_NaN();
  }
}

void fill_directions(RunRecord& rec, const ConfigView& v, const Split& split, int n) {
  const Eigen::MatrixXd X_fit = gather(v.features, split.fit);
  if (!has_variation(X_fit)) return;
  const auto fit = fit_affine(X_fit, gather(v.log_marg1, split.fit), gather(v.features, split.held),
                              gather(v.log_marg1, split.held));
  const auto n_configs = static_cast<std::uint32_t>(v.features.rows());
  double min_cos = 1.0;
  for (int i = 0; i < n; ++i) {
    std::vector<FeaturePair> pairs;
    for (std::uint32_t c = 0; c < n_configs; ++c) {
      if (bit_of(c, i)) continue;
      const std::uint32_t c1 = c | (1u << i);
      pairs.push_back({c, c1, v.features.row(c).transpose(), v.features.row(c1).transpose(), v.log_marg1(c, i),
                       v.log_marg1(c1, i)});
    }
    const auto dir = concept_direction(pairs, i);
    const double a_norm = fit.A.col(i).norm();
    if (dir.direction.norm() == 0.0 || a_norm == 0.0) {
      min_cos = std::numeric_limits<double>::quiet_NaN();
      break;
    }
    min_cos = std::min(min_cos, cosine_similarity(dir.direction, fit.A.col(i)));
  }
  rec.concept_cosine_min = min_cos;

  const std::size_t n_eval = std::min<std::size_t>(split.held.size(), 500);
  std::size_t hits = 0;
  std::size_t total = 0;
  for (std::size_t r = 0; r < n_eval; ++r) {
    const Eigen::VectorXd f = v.features.row(split.held[r]).transpose();
    for (int i = 0; i < n; ++i) {
      for (double alpha : {1.0, -1.0}) {
        const auto s = apply_steering(f, fit, i, alpha);
        ++total;
        if (!s.decoded_shift) continue;
        Eigen::Index arg = 0;
        s.decoded_shift->cwiseAbs().maxCoeff(&arg);
        hits += arg == i;
      }
    }
  }
  rec.steering_hit_rate = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

}  // namespace

RunRecord run_masked_bit(const ExperimentConfig& cfg, const RunSpec& spec) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.cell = graph_label(spec.graph);
  rec.n_latent = spec.n_latent;
  rec.seed = spec.seed;
  try {
    const auto setting = make_setting(cfg, spec.graph, spec.n_latent, spec.seed);
    const int m = spec.m > 0 ? spec.m : setting.pool.n_observed();
    if (m > setting.pool.n_observed()) throw ParameterError("run: m exceeds the observed pool");
    rec.m = m;
    const std::vector<int> prefix(setting.schedule.begin(), setting.schedule.begin() + m);
    const GenerativeModel gm(setting.latent, select_observed(setting.pool, prefix));
    const auto& dag = setting.latent.dag;
    const auto& cpds = setting.latent.cpds;
    const auto train_c = ancestral_sample(dag, cpds, static_cast<std::size_t>(cfg.n_train),
                                          derive_seed(spec.seed, kTrainSampleStream));
    const auto test_c = ancestral_sample(dag, cpds, static_cast<std::size_t>(cfg.n_test),
                                         derive_seed(spec.seed, kTestSampleStream));

    std::mt19937_64 mask_rng(derive_seed(spec.seed, kMaskStream));
    MaskedDataset train_set;
    train_set.input_dim = m;
    train_set.n_classes = 2;
    train_set.tokens.reserve(train_c.size() * static_cast<std::size_t>(m));
    for (auto c : train_c.configs) train_set.add(mask_sample(gm.observed(c), mask_rng));

    auto model = init_model(predictor_for(cfg, spec.n_latent, m, 2), derive_seed(spec.seed, kInitStream));
    TrainHyper hyper = cfg.train;
    hyper.seed = derive_seed(spec.seed, kShuffleStream);
    const auto report = train(model, train_set, hyper);
    rec.train_accuracy = report.final_train_accuracy;
    rec.final_loss = report.loss_trace.back();

    const int eval_mask[1] = {0};
    const auto view = evaluate_configs(gm, model, eval_mask);
    rec.H_c_given_x = view.H_c_given_x;
    const auto split = split_configs(test_c);
    const auto probe = fit_probe(gather(view.features, split.fit), latent_labels(split.fit, spec.n_latent),
                                 gather(view.features, split.held), latent_labels(split.held, spec.n_latent),
                                 cfg.probe);
    rec.probe_acc = probe.accuracy;
    rec.probe_joint_acc = probe.joint_accuracy;
    const auto affine = fit_affine(gather(view.features, split.fit), gather(view.log_post, split.fit),
                                   gather(view.features, split.held), gather(view.log_post, split.held));
    rec.affine_r2 = affine.mean_r_squared;
    rec.affine_degenerate = affine.degenerate;
    fill_identity(rec, view, split, static_cast<int>(gm.n_configs()), cfg.probe);
    fill_directions(rec, view, split, spec.n_latent);
  } catch (const TrainingDivergedError& e) {
    rec.failed = true;
    rec.error = e.what();
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

BlockIdentityRun run_block_identity(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  BlockIdentityRun out;
  auto& rec = out.record;
  const int n = cfg.n_latent;
  rec.cell = graph_label(cfg.graph);
  rec.n_latent = n;
  rec.seed = seed;
  const auto setting = make_setting(cfg, cfg.graph, n, seed);
  const int m = cfg.observed_sizes.empty() ? setting.pool.n_observed() : cfg.observed_sizes.back();
  rec.m = m;
  const std::vector<int> prefix(setting.schedule.begin(), setting.schedule.begin() + m);
  const GenerativeModel gm(setting.latent, select_observed(setting.pool, prefix));

  // All n bits of the permutation behind the first scheduled coordinate, in
  // bit order, so the target is that permutation's image of c.
  const int block_perm = gm.mixing().selected.front().perm;
  std::vector<int> block(static_cast<std::size_t>(n), -1);
  for (int k = 0; k < gm.n_observed(); ++k) {
    const auto& ob = gm.mixing().selected[static_cast<std::size_t>(k)];
    if (ob.perm == block_perm) block[static_cast<std::size_t>(ob.bit)] = k;
  }
  if (std::count(block.begin(), block.end(), -1) > 0) {
    throw ParameterError("block identity: the observed subset does not contain a full permutation block");
  }
  const int n_classes = 1 << n;
  std::vector<int> all_y(static_cast<std::size_t>(n_classes));
  std::iota(all_y.begin(), all_y.end(), 0);
  out.diversity_rank = diversity_L(gm, block, all_y).rank;

  const auto& dag = setting.latent.dag;
  const auto& cpds = setting.latent.cpds;
  const auto train_c =
      ancestral_sample(dag, cpds, static_cast<std::size_t>(cfg.n_train), derive_seed(seed, kTrainSampleStream));
  const auto test_c =
      ancestral_sample(dag, cpds, static_cast<std::size_t>(cfg.n_test), derive_seed(seed, kTestSampleStream));
  MaskedDataset train_set;
  train_set.input_dim = m;
  train_set.n_classes = n_classes;
  for (auto c : train_c.configs) train_set.add(mask_block(gm.observed(c), block));

  auto model = init_model(predictor_for(cfg, n, m, n_classes), derive_seed(seed, kInitStream));
  TrainHyper hyper = cfg.train;
  hyper.seed = derive_seed(seed, kShuffleStream);
  const auto report = train(model, train_set, hyper);
  rec.train_accuracy = report.final_train_accuracy;
  rec.final_loss = report.loss_trace.back();

  const auto view = evaluate_configs(gm, model, block);
  rec.H_c_given_x = view.H_c_given_x;
  const auto split = split_configs(test_c);
  const auto probe = fit_probe(gather(view.features, split.fit), latent_labels(split.fit, n),
                               gather(view.features, split.held), latent_labels(split.held, n), cfg.probe);
  rec.probe_acc = probe.accuracy;
  rec.probe_joint_acc = probe.joint_accuracy;
  const auto affine = fit_affine(gather(view.features, split.fit), gather(view.log_post, split.fit),
                                 gather(view.features, split.held), gather(view.log_post, split.held));
  rec.affine_r2 = affine.mean_r_squared;
  rec.affine_degenerate = affine.degenerate;
  out.report = joint_identity(view, split, n_classes, cfg.probe);
  rec.identity_dim = n_classes;
  rec.row_argmax_hits = out.report.row_argmax_hits;
  rec.dominance_ratio = out.report.dominance_ratio;
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

BaselineStats random_identity_baseline(int feature_dim, int dim, int draws, std::uint64_t seed) {
  if (feature_dim < 1 || dim < 1 || draws < 1) throw ParameterError("random baseline: sizes must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto draw = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd M(r, c);
    for (Eigen::Index j = 0; j < c; ++j) {
      for (Eigen::Index i = 0; i < r; ++i) M(i, j) = gauss(rng);
    }
    return M;
  };
  BaselineStats s;
  double diag = 0.0;
  double off = 0.0;
  for (int t = 0; t < draws; ++t) {
    const Eigen::MatrixXd A = draw(feature_dim, dim);
    const Eigen::MatrixXd W = draw(dim, feature_dim);
    const auto r = identity_check(A, W);
    diag += r.diag_mean_abs;
    off += r.offdiag_mean_abs;
    s.mean_dominance += r.dominance_ratio;
    s.mean_hits += r.row_argmax_hits;
  }
  s.draws = draws;
  s.pooled_dominance = diag / off;
  s.mean_dominance /= draws;
  s.mean_hits /= draws;
  return s;
}

CounterfactualRun run_counterfactual(const ConceptPairSet& set, const ExperimentConfig& cfg) {
  CounterfactualRun out;
  out.A = build_concept_matrix(set, cfg.averaging);
  out.W = fit_concept_probe(set, cfg.concept_probe, cfg.probe);
  out.report = product_report(out.A, out.W);
  for (const auto& c : set.concepts) out.names.push_back(c.name);
  return out;
}

// ---------------------------------------------------------------------------
// Output

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

json num_json(double v) { return std::isfinite(v) ? json(v) : json(num(v)); }

struct Stats {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};

// Mean and sample standard deviation over the finite values.
Stats stats_of(const std::vector<double>& xs) {
  Stats s;
  std::vector<double> v;
  for (double x : xs) {
    if (std::isfinite(x)) v.push_back(x);
  }
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

template <class Get>
Stats collect(std::span<const RunRecord> runs, Get get) {
  std::vector<double> xs;
  for (const auto& r : runs) {
    if (!r.failed) xs.push_back(get(r));
  }
  return stats_of(xs);
}

constexpr const char* kAggregateColumns =
    "n_runs,n_failed,probe_acc_mean,probe_acc_std,affine_r2_mean,affine_r2_std,H_c_given_x_mean,"
    "row_argmax_hits_mean,dominance_ratio_mean,concept_cosine_min_mean,steering_hit_rate_mean";

void write_aggregate_cells(std::ostream& os, std::span<const RunRecord> runs) {
  int failed = 0;
  for (const auto& r : runs) failed += r.failed;
  const auto acc = collect(runs, [](const RunRecord& r) { return r.probe_acc; });
  const auto r2 = collect(runs, [](const RunRecord& r) { return r.affine_r2; });
  os << runs.size() << ',' << failed << ',' << num(acc.mean) << ',' << num(acc.std) << ',' << num(r2.mean) << ','
     << num(r2.std) << ',' << num(collect(runs, [](const RunRecord& r) { return r.H_c_given_x; }).mean) << ','
     << num(collect(runs, [](const RunRecord& r) { return static_cast<double>(r.row_argmax_hits); }).mean) << ','
     << num(collect(runs, [](const RunRecord& r) { return r.dominance_ratio; }).mean) << ','
     << num(collect(runs, [](const RunRecord& r) { return r.concept_cosine_min; }).mean) << ','
     << num(collect(runs, [](const RunRecord& r) { return r.steering_hit_rate; }).mean) << '\n';
}

json check(const std::string& name, double value, double threshold, bool passed) {
  return json{{"name", name}, {"value", num_json(value)}, {"threshold", threshold}, {"passed", passed}};
}

void log_run(std::ostream* log, std::mutex& mu, const RunRecord& r) {
  if (!log) return;
  std::lock_guard lock(mu);
  *log << "[" << r.cell << " n=" << r.n_latent << " seed=" << r.seed << " m=" << r.m << "] ";
  if (r.failed) {
    *log << "FAILED: " << r.error;
  } else {
    *log << "probe_acc=" << num(r.probe_acc) << " r2=" << num(r.affine_r2) << " H=" << num(r.H_c_given_x);
  }
  *log << " (" << std::fixed << std::setprecision(1) << r.seconds << "s)" << std::defaultfloat << '\n';
}

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

}  // namespace

void write_runs_csv(std::ostream& os, std::span<const RunRecord> runs) {
  os << kRunsHeader << '\n';
  for (const auto& r : runs) {
    os << r.seed << ',' << r.m << ',' << num(r.H_c_given_x) << ',';
    if (r.failed) {
      os << "nan,nan,0,nan\n";
      continue;
    }
    os << num(r.probe_acc) << ',' << num(r.affine_r2) << ',' << r.row_argmax_hits << ',' << num(r.dominance_ratio)
       << '\n';
  }
}

json to_json(const RunRecord& r) {
  return json{{"cell", r.cell},
              {"n_latent", r.n_latent},
              {"seed", r.seed},
              {"m", r.m},
              {"H_c_given_x", num_json(r.H_c_given_x)},
              {"probe_acc", num_json(r.probe_acc)},
              {"probe_joint_acc", num_json(r.probe_joint_acc)},
              {"affine_r2", num_json(r.affine_r2)},
              {"affine_degenerate", r.affine_degenerate},
              {"row_argmax_hits", r.row_argmax_hits},
              {"identity_dim", r.identity_dim},
              {"dominance_ratio", num_json(r.dominance_ratio)},
              {"train_accuracy", num_json(r.train_accuracy)},
              {"final_loss", num_json(r.final_loss)},
              {"concept_cosine_min", num_json(r.concept_cosine_min)},
              {"steering_hit_rate", num_json(r.steering_hit_rate)},
              {"failed", r.failed},
              {"error", r.error}};
}

json to_json(const IdentityReport& r) {
  return json{{"dimension", r.product.rows()},
              {"diag_mean_abs", num_json(r.diag_mean_abs)},
              {"offdiag_mean_abs", num_json(r.offdiag_mean_abs)},
              {"row_argmax_hits", r.row_argmax_hits},
              {"dominance_ratio", num_json(r.dominance_ratio)}};
}

std::vector<RunRecord> run_all(const ExperimentConfig& cfg, std::span<const RunSpec> specs, std::ostream* log) {
  std::vector<RunRecord> out(specs.size());
  std::mutex mu;
  const int workers = cfg.parallel ? std::max(1, cfg.threads) : 1;
  if (workers == 1) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      out[i] = run_masked_bit(cfg, specs[i]);
      log_run(log, mu, out[i]);
    }
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < specs.size(); i = next++) {
        out[i] = run_masked_bit(cfg, specs[i]);
        log_run(log, mu, out[i]);
      }
    });
  }
  pool.clear();
  return out;
}

ExperimentOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                 std::ostream* log) {
  validate(cfg);
  std::filesystem::create_directories(out_dir);
  open_out(out_dir / "resolved_config.json") << resolved_json(cfg).dump(2) << '\n';
  const auto t0 = std::chrono::steady_clock::now();
  json summary{{"experiment", to_string(cfg.kind)}};
  json checks = json::array();
  json failed_runs = json::array();

  auto record_runs = [&](std::span<const RunRecord> runs) {
    json arr = json::array();
    for (const auto& r : runs) {
      arr.push_back(to_json(r));
      if (r.failed) failed_runs.push_back(to_json(r));
    }
    return arr;
  };

  if (cfg.kind == ExperimentKind::invertibility_sweep) {
    std::vector<RunSpec> specs;
    for (auto seed : cfg.seeds) {
      for (int m : cfg.observed_sizes) specs.push_back({cfg.graph, cfg.n_latent, seed, m});
    }
    const auto runs = run_all(cfg, specs, log);
    auto csv = open_out(out_dir / "runs.csv");
    write_runs_csv(csv, runs);
    auto agg = open_out(out_dir / "aggregate.csv");
    agg << "m," << kAggregateColumns << '\n';
    std::vector<double> acc_by_m;
    std::vector<double> r2_by_m;
    for (int m : cfg.observed_sizes) {
      std::vector<RunRecord> at;
      for (const auto& r : runs) {
        if (r.m == m) at.push_back(r);
      }
      agg << m << ',';
      write_aggregate_cells(agg, at);
      acc_by_m.push_back(collect(at, [](const RunRecord& r) { return r.probe_acc; }).mean);
      r2_by_m.push_back(collect(at, [](const RunRecord& r) { return r.affine_r2; }).mean);
    }
    double worst_drop = 0.0;
    for (std::size_t i = 1; i < acc_by_m.size(); ++i) worst_drop = std::max(worst_drop, acc_by_m[i - 1] - acc_by_m[i]);
    checks.push_back(check("accuracy_monotone_in_m (largest drop)", worst_drop, cfg.thresholds.monotone_tolerance,
                           worst_drop <= cfg.thresholds.monotone_tolerance));
    checks.push_back(check("accuracy_at_largest_m", acc_by_m.back(), cfg.thresholds.min_full_accuracy,
                           acc_by_m.back() >= cfg.thresholds.min_full_accuracy));
    checks.push_back(check("affine_r2_at_largest_m", r2_by_m.back(), cfg.thresholds.min_full_r2,
                           r2_by_m.back() >= cfg.thresholds.min_full_r2));
    if (cfg.observed_sizes.size() > 1) {
      int paired_ok = 0;
      for (auto seed : cfg.seeds) {
        const RunRecord* lo = nullptr;
        const RunRecord* hi = nullptr;
        for (const auto& r : runs) {
          if (r.seed != seed || r.failed) continue;
          if (r.m == cfg.observed_sizes.front()) lo = &r;
          if (r.m == cfg.observed_sizes.back()) hi = &r;
        }
        paired_ok += lo && hi && hi->affine_r2 > lo->affine_r2;
      }
      checks.push_back(check("affine_r2_largest_m_beats_smallest_m (seeds)", paired_ok,
                             static_cast<double>(cfg.seeds.size()),
                             paired_ok == static_cast<int>(cfg.seeds.size())));
    }
    std::vector<RunRecord> full;
    for (const auto& r : runs) {
      if (r.m == cfg.observed_sizes.back()) full.push_back(r);
    }
    const double cos = collect(full, [](const RunRecord& r) { return r.concept_cosine_min; }).mean;
    const double steer = collect(full, [](const RunRecord& r) { return r.steering_hit_rate; }).mean;
    checks.push_back(check("concept_direction_cosine_at_largest_m", cos, cfg.thresholds.min_concept_cosine,
                           cos >= cfg.thresholds.min_concept_cosine));
    checks.push_back(check("steering_hit_rate_at_largest_m", steer, cfg.thresholds.min_steering_rate,
                           steer >= cfg.thresholds.min_steering_rate));
    summary["runs"] = record_runs(runs);
  } else if (cfg.kind == ExperimentKind::er_sweep) {
    std::vector<RunSpec> specs;
    for (double k : cfg.er_k_grid) {
      for (int n : cfg.n_latent_grid) {
        for (auto seed : cfg.seeds) specs.push_back({GraphSpec::er(k), n, seed, 0});
      }
    }
    const auto runs = run_all(cfg, specs, log);
    std::filesystem::create_directories(out_dir / "cells");
    auto agg = open_out(out_dir / "aggregate.csv");
    agg << "graph,n_latent," << kAggregateColumns << '\n';
    json grid = json::array();
    for (double k : cfg.er_k_grid) {
      for (int n : cfg.n_latent_grid) {
        const std::string label = graph_label(GraphSpec::er(k));
        std::vector<RunRecord> cell;
        for (const auto& r : runs) {
          if (r.cell == label && r.n_latent == n) cell.push_back(r);
        }
        auto csv = open_out(out_dir / "cells" / (label + "_n" + std::to_string(n) + ".csv"));
        write_runs_csv(csv, cell);
        agg << label << ',' << n << ',';
        write_aggregate_cells(agg, cell);
        const double acc = collect(cell, [](const RunRecord& r) { return r.probe_acc; }).mean;
        checks.push_back(check("accuracy " + label + " n=" + std::to_string(n), acc,
                               cfg.thresholds.min_cell_accuracy, acc >= cfg.thresholds.min_cell_accuracy));
      }
    }
    summary["runs"] = record_runs(runs);
  } else if (cfg.kind == ExperimentKind::identity_check) {
    std::vector<RunRecord> records;
    json reports = json::array();
    std::mutex log_mu;
    for (auto seed : cfg.seeds) {
      try {
        const auto run = run_block_identity(cfg, seed);
        records.push_back(run.record);
        auto csv = open_out(out_dir / ("product_seed" + std::to_string(seed) + ".csv"));
        write_product_csv(csv, run.report.product);
        json rj = to_json(run.report);
        rj["seed"] = seed;
        rj["diversity_rank"] = run.diversity_rank;
        reports.push_back(rj);
        const int dim = static_cast<int>(run.report.product.rows());
        checks.push_back(check("row_argmax_hits seed=" + std::to_string(seed), run.report.row_argmax_hits, dim,
                               run.report.row_argmax_hits == dim));
        checks.push_back(check("dominance_ratio seed=" + std::to_string(seed), run.report.dominance_ratio,
                               cfg.thresholds.min_dominance,
                               run.report.dominance_ratio >= cfg.thresholds.min_dominance));
      } catch (const TrainingDivergedError& e) {
        RunRecord r;
        r.seed = seed;
        r.failed = true;
        r.error = e.what();
        records.push_back(r);
        checks.push_back(check("identity seed=" + std::to_string(seed), 0.0, 1.0, false));
      }
      log_run(log, log_mu, records.back());
    }
    auto csv = open_out(out_dir / "runs.csv");
    write_runs_csv(csv, records);
    const int feature_dim = cfg.predictor.feature_dim ? cfg.predictor.feature_dim : std::max(64, 1 << cfg.n_latent);
    const auto base = random_identity_baseline(feature_dim, 1 << cfg.n_latent, cfg.baseline_draws,
                                               derive_seed(cfg.seeds.front(), kProbeStream));
    summary["random_baseline"] = {{"draws", base.draws},
                                  {"pooled_dominance", base.pooled_dominance},
                                  {"mean_dominance", base.mean_dominance},
                                  {"mean_row_argmax_hits", base.mean_hits}};
    checks.push_back(check("random_baseline_dominance", base.pooled_dominance, 1.0,
                           base.pooled_dominance >= 0.8 && base.pooled_dominance <= 1.2));
    summary["reports"] = reports;
    summary["runs"] = record_runs(records);
  } else {
    ConceptPairSet set;
    if (cfg.embeddings_dir.empty()) {
      set = synthetic_pair_set(reference_concepts(), cfg.synthetic_dim, cfg.synthetic_noise, cfg.synthetic_seed);
      write_embeddings(set, out_dir / "embeddings");
      summary["embeddings"] = "synthetic";
    } else {
      set = load_embeddings(cfg.embeddings_dir);
      summary["embeddings"] = cfg.embeddings_dir;
    }
    const auto run = run_counterfactual(set, cfg);
    auto csv = open_out(out_dir / "heatmap.csv");
    write_product_csv(csv, run.report.product, run.names);
    json rj = to_json(run.report);
    rj["n_concepts"] = set.n_concepts();
    rj["n_pairs"] = set.n_pairs();
    rj["dim"] = set.dim;
    rj["probe_train_accuracy"] = run.W.train_accuracy;
    rj["probe_converged"] = run.W.converged;
    rj["warnings"] = run.W.warnings;
    open_out(out_dir / "identity_report.json") << rj.dump(2) << '\n';
    summary["report"] = rj;
    checks.push_back(check("row_argmax_hits", run.report.row_argmax_hits, set.n_concepts(),
                           run.report.row_argmax_hits == set.n_concepts()));
  }

  bool all = failed_runs.empty();
  for (const auto& c : checks) all = all && c.at("passed").get<bool>();
  summary["checks"] = checks;
  summary["failed_runs"] = failed_runs;
  summary["all_passed"] = all;
  summary["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  open_out(out_dir / "summary.json") << summary.dump(2) << '\n';
  return {summary, all};
}

}  // namespace latentid
