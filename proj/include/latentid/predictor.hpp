#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "latentid/mixing.hpp"

namespace latentid {

struct PredictorConfig {
  int input_dim = 0;  // m, number of observed coordinates
  int embed_dim = 64;
  int hidden_dim = 256;
  int n_layers = 3;
  int feature_dim = 64;
  int n_classes = 2;
  bool use_batchnorm = true;

  void validate() const;
};

struct TrainHyper {
  double lr = 1e-4;
  int batch_size = 256;
  int epochs = 200;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

void to_json(nlohmann::json& j, const PredictorConfig& c);
void from_json(const nlohmann::json& j, PredictorConfig& c);
void to_json(nlohmann::json& j, const TrainHyper& h);
void from_json(const nlohmann::json& j, TrainHyper& h);

// Masked inputs in compact token form: per coordinate 0, 1, or 2 (masked).
struct MaskedDataset {
  int input_dim = 0;
  int n_classes = 2;
  std::vector<std::uint8_t> tokens;  // size() * input_dim
  std::vector<int> targets;

  static constexpr std::uint8_t kMaskToken = 2;

  std::size_t size() const { return targets.size(); }
  void add(const MaskedInput& in);
  std::span<const std::uint8_t> row(std::size_t i) const {
    return {tokens.data() + i * static_cast<std::size_t>(input_dim), static_cast<std::size_t>(input_dim)};
  }
};

MaskedDataset make_dataset(std::span<const MaskedInput> inputs, int n_classes);

struct PredictionOutput {
  Eigen::VectorXd features;  // f_x(x)
  Eigen::VectorXd logits;    // f_y[k] . f_x(x)
  double log_partition = 0.0;
  Eigen::VectorXd probs;
};

struct TrainReport {
  std::vector<double> loss_trace;  // mean cross-entropy per epoch
  double final_train_accuracy = 0.0;
  double final_val_accuracy = 0.0;
  std::uint64_t seed = 0;
  TrainHyper hyper;
};

void to_json(nlohmann::json& j, const TrainReport& r);

// Embedding (one vector per coordinate and token value, summed), then
// n_layers x [linear, batch norm, ReLU], then a linear projection to the
// feature space f_x, then a bias-free head whose rows are f_y(k).
//
// Parameters are one flat vector. Layout, each matrix column-major:
//   E        embed_dim x 3*input_dim
//   per layer l:  W_l (out x in), [b_l if no batch norm], gamma_l, beta_l (if batch norm)
//   W_f      feature_dim x last_width,  b_f (feature_dim)
//   F_y      n_classes x feature_dim
// Buffers (batch-norm running mean, running var per layer) follow the
// parameters in checkpoints.
class PredictorModel {
 public:
  enum class Mode { train, eval };

  explicit PredictorModel(const PredictorConfig& cfg);

  const PredictorConfig& config() const { return cfg_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode m) { mode_ = m; }
  std::uint64_t seed() const { return seed_; }

  Eigen::VectorXd& parameters() { return params_; }
  const Eigen::VectorXd& parameters() const { return params_; }
  Eigen::VectorXd& buffers() { return buffers_; }
  const Eigen::VectorXd& buffers() const { return buffers_; }

  // Head rows f_y(k), n_classes x feature_dim.
  Eigen::Map<const Eigen::MatrixXd> head() const;
  Eigen::Map<Eigen::MatrixXd> head();

  struct Batch {
    Eigen::MatrixXd features;  // feature_dim x B
    Eigen::MatrixXd logits;    // n_classes x B
  };

  // Forward pass over `rows` in the model's current mode; never updates
  // running statistics.
  Batch forward(const MaskedDataset& data, std::span<const std::size_t> rows) const;
  Batch forward_all(const MaskedDataset& data) const;

  // Mean cross-entropy over `rows` and its gradient w.r.t. parameters().
  // In train mode batch statistics are used; `update_running` also folds
  // them into the running buffers.
  double loss_and_gradient(const MaskedDataset& data, std::span<const std::size_t> rows,
                           Eigen::VectorXd* grad, bool update_running = false);

  struct Layout {
    std::string name;
    Eigen::Index offset;
    Eigen::Index rows;
    Eigen::Index cols;
  };
  const std::vector<Layout>& layout() const { return layout_; }
  const std::vector<Layout>& buffer_layout() const { return buffer_layout_; }

  void save(const std::filesystem::path& dir, const TrainHyper* hyper = nullptr) const;
  static PredictorModel load(const std::filesystem::path& dir);

 private:
  friend PredictorModel init_model(const PredictorConfig& cfg, std::uint64_t seed);

  struct LayerSlots {
    Eigen::Index W, b = -1, gamma = -1, beta = -1, rmean = -1, rvar = -1;
    int in = 0, out = 0;
  };

  struct Cache;
  Batch run(const MaskedDataset& data, std::span<const std::size_t> rows, Cache* cache,
            Eigen::VectorXd* running_out) const;

  Eigen::Map<const Eigen::MatrixXd> mat(Eigen::Index off, int r, int c) const;
  Eigen::Map<const Eigen::VectorXd> vec(Eigen::Index off, int n) const;

  PredictorConfig cfg_;
  Mode mode_ = Mode::train;
  std::uint64_t seed_ = 0;
  Eigen::VectorXd params_;
  Eigen::VectorXd buffers_;
  std::vector<Layout> layout_;
  std::vector<Layout> buffer_layout_;
  Eigen::Index embed_ = 0, feat_W_ = 0, feat_b_ = 0, head_ = 0;
  std::vector<LayerSlots> layers_;
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Fan-in scaled zero-mean Gaussian init; deterministic per seed.
PredictorModel init_model(const PredictorConfig& cfg, std::uint64_t seed);

// Adam on mean cross-entropy. Leaves the model in eval mode. `val` may be
// empty. Throws TrainingDivergedError on a non-finite epoch loss.
TrainReport train(PredictorModel& model, const MaskedDataset& data, const TrainHyper& hyper,
                  const MaskedDataset* val = nullptr);

PredictionOutput forward(const PredictorModel& model, const MaskedInput& masked);

// Accuracy of argmax prediction in the current mode.
double accuracy(const PredictorModel& model, const MaskedDataset& data);

struct GradCheckResult {
  double max_rel_error = 0.0;
  int n_checked = 0;
};

// Central finite differences on `n_coords` random parameter coordinates of
// the mean cross-entropy over `samples`, in the model's current mode.
// Relative error is |a - n| / max(|a|, |n|), taken as 0 when both vanish.
GradCheckResult grad_check(const PredictorModel& model, const MaskedDataset& samples, double eps,
                           int n_coords = 100, std::uint64_t seed = 0);

void write_features_csv(std::ostream& os, const Eigen::MatrixXd& features_by_column);

}  // namespace latentid
