#include "latentid/predictor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <random>

#include "latentid/errors.hpp"

namespace latentid {

void PredictorConfig::validate() const {
  if (input_dim < 1) throw ParameterError("predictor: input_dim must be positive");
  if (embed_dim < 1 || hidden_dim < 1 || feature_dim < 1) {
    throw ParameterError("predictor: embed_dim, hidden_dim and feature_dim must be positive");
  }
  if (n_layers < 0) throw ParameterError("predictor: n_layers must be >= 0");
  if (n_classes < 2) throw ParameterError("predictor: n_classes must be >= 2");
}

void to_json(nlohmann::json& j, const PredictorConfig& c) {
  j = {{"input_dim", c.input_dim},     {"embed_dim", c.embed_dim}, {"hidden_dim", c.hidden_dim},
       {"n_layers", c.n_layers},       {"feature_dim", c.feature_dim},
       {"n_classes", c.n_classes},     {"use_batchnorm", c.use_batchnorm}};
}

void from_json(const nlohmann::json& j, PredictorConfig& c) {
  c.input_dim = j.value("input_dim", c.input_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.use_batchnorm = j.value("use_batchnorm", c.use_batchnorm);
}

void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = {{"lr", h.lr},       {"batch_size", h.batch_size}, {"epochs", h.epochs}, {"seed", h.seed},
       {"beta1", h.beta1}, {"beta2", h.beta2},           {"adam_eps", h.adam_eps}};
}

void from_json(const nlohmann::json& j, TrainHyper& h) {
  h.lr = j.value("lr", h.lr);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.epochs = j.value("epochs", h.epochs);
  h.seed = j.value("seed", h.seed);
  h.beta1 = j.value("beta1", h.beta1);
  h.beta2 = j.value("beta2", h.beta2);
  h.adam_eps = j.value("adam_eps", h.adam_eps);
}

void to_json(nlohmann::json& j, const TrainReport& r) {
  j = {{"loss_trace", r.loss_trace},
       {"final_train_accuracy", r.final_train_accuracy},
       {"final_val_accuracy", r.final_val_accuracy},
       {"seed", r.seed},
       {"hyper", r.hyper}};
}

void MaskedDataset::add(const MaskedInput& in) {
  if (static_cast<int>(in.visible.size()) != input_dim) {
    throw ParameterError("dataset: masked input has length " + std::to_string(in.visible.size()) +
                         ", expected " + std::to_string(input_dim));
  }
  if (in.target < 0 || in.target >= n_classes) throw ParameterError("dataset: target out of class range");
  for (int j = 0; j < input_dim; ++j) {
    const auto u = static_cast<std::size_t>(j);
    tokens.push_back(in.mask_indicator[u] ? kMaskToken : in.visible[u]);
  }
  targets.push_back(in.target);
}

MaskedDataset make_dataset(std::span<const MaskedInput> inputs, int n_classes) {
  if (inputs.empty()) throw ParameterError("make_dataset: no inputs");
  MaskedDataset d;
  d.input_dim = static_cast<int>(inputs.front().visible.size());
  d.n_classes = n_classes;
  d.tokens.reserve(inputs.size() * static_cast<std::size_t>(d.input_dim));
  d.targets.reserve(inputs.size());
  for (const auto& in : inputs) d.add(in);
  return d;
}

// ---------------------------------------------------------------------------

PredictorModel::PredictorModel(const PredictorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Eigen::Index off = 0;
  Eigen::Index boff = 0;
  auto add = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    layout_.push_back({name, off, r, c});
    const Eigen::Index at = off;
    off += r * c;
    return at;
  };
  auto add_buffer = [&](const std::string& name, Eigen::Index n) {
    buffer_layout_.push_back({name, boff, n, 1});
    const Eigen::Index at = boff;
    boff += n;
    return at;
  };

  embed_ = add("embedding", cfg_.embed_dim, 3 * cfg_.input_dim);
  int width = cfg_.embed_dim;
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerSlots s;
    s.in = width;
    s.out = cfg_.hidden_dim;
    const std::string p = "layer" + std::to_string(l) + ".";
    s.W = add(p + "weight", s.out, s.in);
    if (cfg_.use_batchnorm) {
      // A bias ahead of batch norm is cancelled by the mean subtraction.
      s.gamma = add(p + "bn.gamma", s.out, 1);
      s.beta = add(p + "bn.beta", s.out, 1);
      s.rmean = add_buffer(p + "bn.running_mean", s.out);
      s.rvar = add_buffer(p + "bn.running_var", s.out);
    } else {
      s.b = add(p + "bias", s.out, 1);
    }
    layers_.push_back(s);
    width = s.out;
  }
  feat_W_ = add("features.weight", cfg_.feature_dim, width);
  feat_b_ = add("features.bias", cfg_.feature_dim, 1);
  head_ = add("head", cfg_.n_classes, cfg_.feature_dim);
  params_ = Eigen::VectorXd::Zero(off);
  buffers_ = Eigen::VectorXd::Zero(boff);
  for (const auto& s : layers_) {
    if (s.rvar >= 0) buffers_.segment(s.rvar, s.out).setOnes();
    if (s.gamma >= 0) params_.segment(s.gamma, s.out).setOnes();
  }
}

Eigen::Map<const Eigen::MatrixXd> PredictorModel::mat(Eigen::Index off, int r, int c) const {
  return {params_.data() + off, r, c};
}

Eigen::Map<const Eigen::VectorXd> PredictorModel::vec(Eigen::Index off, int n) const {
  return {params_.data() + off, n};
}

Eigen::Map<const Eigen::MatrixXd> PredictorModel::head() const {
  return mat(head_, cfg_.n_classes, cfg_.feature_dim);
}

Eigen::Map<Eigen::MatrixXd> PredictorModel::head() {
  return {params_.data() + head_, cfg_.n_classes, cfg_.feature_dim};
}

struct PredictorModel::Cache {
  std::vector<Eigen::MatrixXd> inputs;  // input to layer l (inputs[0] = embedding output)
  std::vector<Eigen::MatrixXd> xhat;    // normalized pre-activation (or raw if no batch norm)
  std::vector<Eigen::VectorXd> invstd;
  std::vector<Eigen::MatrixXd> act;     // post-ReLU output of layer l
};

PredictorModel::Batch PredictorModel::run(const MaskedDataset& data, std::span<const std::size_t> rows,
                                          Cache* cache, Eigen::VectorXd* running_out) const {
  if (data.input_dim != cfg_.input_dim) {
    throw ParameterError("predictor: dataset input_dim " + std::to_string(data.input_dim) +
                         " != model input_dim " + std::to_string(cfg_.input_dim));
  }
  const auto B = static_cast<Eigen::Index>(rows.size());
  const int m = cfg_.input_dim;
  const bool batch_stats = mode_ == Mode::train;

  const auto E = mat(embed_, cfg_.embed_dim, 3 * m);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(cfg_.embed_dim, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto tok = data.row(rows[static_cast<std::size_t>(b)]);
    auto col = h.col(b);
    for (int j = 0; j < m; ++j) col += E.col(3 * j + tok[static_cast<std::size_t>(j)]);
  }

  for (const auto& s : layers_) {
    if (cache) cache->inputs.push_back(h);
    Eigen::MatrixXd z = mat(s.W, s.out, s.in) * h;
    Eigen::VectorXd invstd;
    if (cfg_.use_batchnorm) {
      Eigen::VectorXd mean;
      Eigen::VectorXd var;
      if (batch_stats) {
        mean = z.rowwise().mean();
        z.colwise() -= mean;
        var = z.array().square().rowwise().mean();
        if (running_out) {
          auto rm = running_out->segment(s.rmean, s.out);
          auto rv = running_out->segment(s.rvar, s.out);
          const double unbias = B > 1 ? static_cast<double>(B) / static_cast<double>(B - 1) : 1.0;
          rm = (1.0 - kBatchNormMomentum) * rm + kBatchNormMomentum * mean;
          rv = (1.0 - kBatchNormMomentum) * rv + kBatchNormMomentum * unbias * var;
        }
      } else {
        mean = buffers_.segment(s.rmean, s.out);
        var = buffers_.segment(s.rvar, s.out);
        z.colwise() -= mean;
      }
      invstd = (var.array() + kBatchNormEps).rsqrt().matrix();
      z = invstd.asDiagonal() * z;
      if (cache) {
        cache->xhat.push_back(z);
        cache->invstd.push_back(invstd);
      }
      z = vec(s.gamma, s.out).asDiagonal() * z;
      z.colwise() += vec(s.beta, s.out);
    } else {
      z.colwise() += vec(s.b, s.out);
      if (cache) {
        cache->xhat.push_back(z);
        cache->invstd.emplace_back();
      }
    }
    h = z.cwiseMax(0.0);
    if (cache) cache->act.push_back(h);
  }

  Batch out;
  const int width = layers_.empty() ? cfg_.embed_dim : layers_.back().out;
  if (cache) cache->inputs.push_back(h);
  out.features = mat(feat_W_, cfg_.feature_dim, width) * h;
  out.features.colwise() += vec(feat_b_, cfg_.feature_dim);
  out.logits = head() * out.features;
  return out;
}

PredictorModel::Batch PredictorModel::forward(const MaskedDataset& data,
                                              std::span<const std::size_t> rows) const {
  return run(data, rows, nullptr, nullptr);
}

PredictorModel::Batch PredictorModel::forward_all(const MaskedDataset& data) const {
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return forward(data, rows);
}

namespace {

// Column-wise log-sum-exp.
Eigen::RowVectorXd log_partition(const Eigen::MatrixXd& logits) {
  const Eigen::RowVectorXd mx = logits.colwise().maxCoeff();
  return mx.array() + (logits.rowwise() - mx).array().exp().colwise().sum().log();
}

}  // namespace

double PredictorModel::loss_and_gradient(const MaskedDataset& data, std::span<const std::size_t> rows,
                                         Eigen::VectorXd* grad, bool update_running) {
  if (rows.empty()) throw ParameterError("predictor: empty batch");
  Cache cache;
  Eigen::VectorXd running = buffers_;
  const auto out = run(data, rows, grad ? &cache : nullptr,
                       update_running && mode_ == Mode::train ? &running : nullptr);
  const auto B = static_cast<Eigen::Index>(rows.size());
  const Eigen::RowVectorXd lz = log_partition(out.logits);
  double loss = 0.0;
  for (Eigen::Index b = 0; b < B; ++b) {
    const int y = data.targets[rows[static_cast<std::size_t>(b)]];
    loss += lz(b) - out.logits(y, b);
  }
  loss /= static_cast<double>(B);
  if (update_running && mode_ == Mode::train) buffers_ = running;
  if (!grad) return loss;

  grad->setZero(params_.size());
  auto gmat = [&](Eigen::Index off, Eigen::Index r, Eigen::Index c) {
    return Eigen::Map<Eigen::MatrixXd>(grad->data() + off, r, c);
  };
  auto gvec = [&](Eigen::Index off, Eigen::Index n) { return Eigen::Map<Eigen::VectorXd>(grad->data() + off, n); };

  // d loss / d logits = (softmax - onehot) / B
  Eigen::MatrixXd dlogits = (out.logits.rowwise() - lz).array().exp().matrix();
  for (Eigen::Index b = 0; b < B; ++b) dlogits(data.targets[rows[static_cast<std::size_t>(b)]], b) -= 1.0;
  dlogits /= static_cast<double>(B);

  gmat(head_, cfg_.n_classes, cfg_.feature_dim).noalias() = dlogits * out.features.transpose();
  const Eigen::MatrixXd dfeat = head().transpose() * dlogits;

  const int width = layers_.empty() ? cfg_.embed_dim : layers_.back().out;
  const Eigen::MatrixXd& last_in = cache.inputs.back();
  gmat(feat_W_, cfg_.feature_dim, width).noalias() = dfeat * last_in.transpose();
  gvec(feat_b_, cfg_.feature_dim) = dfeat.rowwise().sum();
  Eigen::MatrixXd dh = mat(feat_W_, cfg_.feature_dim, width).transpose() * dfeat;

  for (int l = static_cast<int>(layers_.size()) - 1; l >= 0; --l) {
    const auto& s = layers_[static_cast<std::size_t>(l)];
    const auto ul = static_cast<std::size_t>(l);
    Eigen::MatrixXd dz = (cache.act[ul].array() > 0.0).select(dh, 0.0);
    if (cfg_.use_batchnorm) {
      const Eigen::MatrixXd& xhat = cache.xhat[ul];
      gvec(s.gamma, s.out) = (dz.array() * xhat.array()).rowwise().sum().matrix();
      gvec(s.beta, s.out) = dz.rowwise().sum();
      const Eigen::MatrixXd dxhat = vec(s.gamma, s.out).asDiagonal() * dz;
      if (mode_ == Mode::train) {
        const Eigen::VectorXd sum_d = dxhat.rowwise().sum();
        const Eigen::VectorXd sum_dx = (dxhat.array() * xhat.array()).rowwise().sum().matrix();
        const double inv_b = 1.0 / static_cast<double>(B);
        dz = dxhat;
        dz.colwise() -= sum_d * inv_b;
        dz -= (xhat.array().colwise() * (sum_dx * inv_b).array()).matrix();
        dz = cache.invstd[ul].asDiagonal() * dz;
      } else {
        dz = cache.invstd[ul].asDiagonal() * dxhat;
      }
    } else {
      gvec(s.b, s.out) = dz.rowwise().sum();
    }
    gmat(s.W, s.out, s.in).noalias() = dz * cache.inputs[ul].transpose();
    dh = mat(s.W, s.out, s.in).transpose() * dz;
  }

  auto dE = gmat(embed_, cfg_.embed_dim, 3 * cfg_.input_dim);
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto tok = data.row(rows[static_cast<std::size_t>(b)]);
    for (int j = 0; j < cfg_.input_dim; ++j) dE.col(3 * j + tok[static_cast<std::size_t>(j)]) += dh.col(b);
  }
  return loss;
}

PredictorModel init_model(const PredictorConfig& cfg, std::uint64_t seed) {
  PredictorModel model(cfg);
  model.seed_ = seed;
  std::mt19937_64 rng(seed);
  auto fill = [&](Eigen::Index off, Eigen::Index n, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Eigen::Index i = 0; i < n; ++i) model.params_(off + i) = dist(rng);
  };
  // The embedding output is a sum of input_dim columns.
  fill(model.embed_, cfg.embed_dim * 3 * cfg.input_dim, 1.0 / std::sqrt(static_cast<double>(cfg.input_dim)));
  for (const auto& s : model.layers_) fill(s.W, static_cast<Eigen::Index>(s.out) * s.in, std::sqrt(2.0 / s.in));
  const int width = model.layers_.empty() ? cfg.embed_dim : model.layers_.back().out;
  fill(model.feat_W_, static_cast<Eigen::Index>(cfg.feature_dim) * width, std::sqrt(1.0 / width));
  fill(model.head_, static_cast<Eigen::Index>(cfg.n_classes) * cfg.feature_dim,
       std::sqrt(1.0 / cfg.feature_dim));
  model.mode_ = PredictorModel::Mode::train;
  return model;
}

TrainReport train(PredictorModel& model, const MaskedDataset& data, const TrainHyper& hyper,
                  const MaskedDataset* val) {
  if (data.size() == 0) throw ParameterError("train: empty dataset");
  if (data.n_classes != model.config().n_classes) throw ParameterError("train: class count mismatch");
  if (hyper.batch_size < 2) throw ParameterError("train: batch_size must be >= 2");
  if (hyper.epochs < 1) throw ParameterError("train: epochs must be >= 1");

  TrainReport report;
  report.seed = hyper.seed;
  report.hyper = hyper;
  model.set_mode(PredictorModel::Mode::train);

  const Eigen::Index n_params = model.parameters().size();
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n_params);
  Eigen::VectorXd m2 = Eigen::VectorXd::Zero(n_params);
  Eigen::VectorXd grad(n_params);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(hyper.seed);
  long step = 0;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      // Batch statistics are undefined for a single sample.
      if (end - start < 2) continue;
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const double loss = model.loss_and_gradient(data, rows, &grad, true);
      if (!std::isfinite(loss)) {
        throw TrainingDivergedError(epoch, "train: non-finite loss at epoch " + std::to_string(epoch));
      }
      ++step;
      m1 = hyper.beta1 * m1 + (1.0 - hyper.beta1) * grad;
      m2 = hyper.beta2 * m2 + (1.0 - hyper.beta2) * grad.cwiseAbs2();
      const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
      model.parameters().array() -=
          hyper.lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + hyper.adam_eps);
      total += loss * static_cast<double>(end - start);
      seen += end - start;
    }
    const double epoch_loss = seen ? total / static_cast<double>(seen) : 0.0;
    if (!std::isfinite(epoch_loss) || !model.parameters().allFinite()) {
      throw TrainingDivergedError(epoch, "train: diverged at epoch " + std::to_string(epoch));
    }
    report.loss_trace.push_back(epoch_loss);
  }

  model.set_mode(PredictorModel::Mode::eval);
  if (!model.buffers().allFinite()) throw TrainingDivergedError(hyper.epochs - 1, "train: non-finite running statistics");
  report.final_train_accuracy = accuracy(model, data);
  if (val && val->size() > 0) report.final_val_accuracy = accuracy(model, *val);
  return report;
}

PredictionOutput forward(const PredictorModel& model, const MaskedInput& masked) {
  MaskedDataset one;
  one.input_dim = model.config().input_dim;
  one.n_classes = model.config().n_classes;
  if (masked.n_classes() != one.n_classes) throw ParameterError("forward: target class count differs from model");
  one.add(masked);
  const std::size_t row = 0;
  const auto batch = model.forward(one, std::span<const std::size_t>(&row, 1));
  PredictionOutput out;
  out.features = batch.features.col(0);
  out.logits = batch.logits.col(0);
  const double mx = out.logits.maxCoeff();
  out.log_partition = mx + std::log((out.logits.array() - mx).exp().sum());
  out.probs = (out.logits.array() - out.log_partition).exp().matrix();
  return out;
}

double accuracy(const PredictorModel& model, const MaskedDataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t hits = 0;
  constexpr std::size_t chunk = 2048;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    rows.resize(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const auto batch = model.forward(data, rows);
    for (Eigen::Index b = 0; b < batch.logits.cols(); ++b) {
      Eigen::Index arg = 0;
      batch.logits.col(b).maxCoeff(&arg);
      if (static_cast<int>(arg) == data.targets[rows[static_cast<std::size_t>(b)]]) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

GradCheckResult grad_check(const PredictorModel& model, const MaskedDataset& samples, double eps,
                           int n_coords, std::uint64_t seed) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw ParameterError("grad_check: eps must lie in [1e-6, 1e-3]");
  PredictorModel probe = model;
  std::vector<std::size_t> rows(samples.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  Eigen::VectorXd analytic;
  probe.loss_and_gradient(samples, rows, &analytic, false);

  const Eigen::Index n = probe.parameters().size();
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(n));
  std::iota(coords.begin(), coords.end(), Eigen::Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(coords.begin(), coords.end(), rng);
  coords.resize(std::min<std::size_t>(coords.size(), static_cast<std::size_t>(n_coords)));

  GradCheckResult res;
  for (Eigen::Index i : coords) {
    const double saved = probe.parameters()(i);
    probe.parameters()(i) = saved + eps;
    const double up = probe.loss_and_gradient(samples, rows, nullptr, false);
    probe.parameters()(i) = saved - eps;
    const double down = probe.loss_and_gradient(samples, rows, nullptr, false);
    probe.parameters()(i) = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic(i);
    const double denom = std::max(std::abs(a), std::abs(numeric));
    const double rel = denom == 0.0 ? 0.0 : std::abs(a - numeric) / denom;
    res.max_rel_error = std::max(res.max_rel_error, rel);
    ++res.n_checked;
  }
  return res;
}

void write_features_csv(std::ostream& os, const Eigen::MatrixXd& features_by_column) {
  os << "sample_id";
  for (Eigen::Index k = 0; k < features_by_column.rows(); ++k) os << ",f_" << k;
  os << '\n' << std::setprecision(9);
  for (Eigen::Index b = 0; b < features_by_column.cols(); ++b) {
    os << b;
    for (Eigen::Index k = 0; k < features_by_column.rows(); ++k) os << ',' << features_by_column(k, b);
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + params.bin (little-endian float32, parameters
// then buffers, in layout() / buffer_layout() order).

namespace {

void write_f32_le(std::ostream& os, double v) {
  const auto f = static_cast<float>(v);
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

double read_f32_le(std::istream& is) {
  std::uint32_t bits = 0;
  is.read(reinterpret_cast<char*>(&bits), sizeof bits);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  float f = 0.0f;
  std::memcpy(&f, &bits, sizeof f);
  return static_cast<double>(f);
}

}  // namespace

void PredictorModel::save(const std::filesystem::path& dir, const TrainHyper* hyper) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["config"] = cfg_;
  manifest["seed"] = seed_;
  manifest["mode"] = mode_ == Mode::eval ? "eval" : "train";
  if (hyper) manifest["hyper"] = *hyper;
  manifest["dtype"] = "float32-le";
  manifest["blob"] = "params.bin";
  auto describe = [](const std::vector<Layout>& ls) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : ls) arr.push_back({{"name", l.name}, {"rows", l.rows}, {"cols", l.cols}});
    return arr;
  };
  manifest["parameters"] = describe(layout_);
  manifest["buffers"] = describe(buffer_layout_);
  manifest["n_parameters"] = params_.size();
  manifest["n_buffers"] = buffers_.size();
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';

  std::ofstream blob(dir / "params.bin", std::ios::binary);
  for (Eigen::Index i = 0; i < params_.size(); ++i) write_f32_le(blob, params_(i));
  for (Eigen::Index i = 0; i < buffers_.size(); ++i) write_f32_le(blob, buffers_(i));
  if (!blob) throw LoadError("checkpoint: failed writing " + (dir / "params.bin").string());
}

PredictorModel PredictorModel::load(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw LoadError("checkpoint: cannot open " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint: " + (dir / "manifest.json").string() + ": " + e.what());
  }
  PredictorModel model(manifest.at("config").get<PredictorConfig>());
  model.seed_ = manifest.value("seed", std::uint64_t{0});
  model.mode_ = manifest.value("mode", std::string("eval")) == "eval" ? Mode::eval : Mode::train;
  const auto blob_path = dir / manifest.value("blob", std::string("params.bin"));
  const auto expected = static_cast<std::uintmax_t>(model.params_.size() + model.buffers_.size()) * 4;
  std::error_code ec;
  const auto actual = std::filesystem::file_size(blob_path, ec);
  if (ec || actual != expected) {
    throw LoadError("checkpoint: " + blob_path.string() + " has " + std::to_string(ec ? 0 : actual) +
                    " bytes, expected " + std::to_string(expected));
  }
  std::ifstream blob(blob_path, std::ios::binary);
  for (Eigen::Index i = 0; i < model.params_.size(); ++i) model.params_(i) = read_f32_le(blob);
  for (Eigen::Index i = 0; i < model.buffers_.size(); ++i) model.buffers_(i) = read_f32_le(blob);
  if (!model.params_.allFinite() || !model.buffers_.allFinite()) {
    throw LoadError("checkpoint: " + blob_path.string() + " contains non-finite values");
  }
  return model;
}

}  // namespace latentid
