#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace latentid {

// Row-major sample convention throughout: features are N x d, one sample
// per row; label and posterior matrices are N x (outputs).
using LabelMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

struct ProbeOptions {
  // Objective: sum of per-sample log-loss + l2/2 * |w|^2, intercept unpenalized.
  double l2 = 1.0;
  int max_iter = 500;
  double tol = 1e-6;  // on the gradient max-norm, relative to max(1, |objective|)
};

struct ProbeWeights {
  Eigen::MatrixXd W;     // n_targets x d
  Eigen::VectorXd bias;  // n_targets
  // Single-class label columns: no fit, constant prediction.
  std::vector<bool> degenerate;
  std::vector<int> constant_label;
};

struct ProbeResult {
  ProbeWeights weights;
  std::vector<double> per_variable_accuracy;
  double accuracy = 0.0;        // mean over variables
  double joint_accuracy = 0.0;  // all variables right at once
  bool any_degenerate = false;
};

// One-vs-rest binary logistic probe per label column.
ProbeWeights fit_probe(const Eigen::MatrixXd& features, const LabelMatrix& labels,
                       const ProbeOptions& opts = {});
ProbeResult evaluate_probe(const ProbeWeights& weights, const Eigen::MatrixXd& features,
                           const LabelMatrix& labels);
// Fit on the fit split, score on the held-out split.
ProbeResult fit_probe(const Eigen::MatrixXd& fit_features, const LabelMatrix& fit_labels,
                      const Eigen::MatrixXd& test_features, const LabelMatrix& test_labels,
                      const ProbeOptions& opts = {});

struct MultinomialFit {
  Eigen::MatrixXd W;     // n_classes x d
  Eigen::VectorXd bias;  // n_classes
  double train_accuracy = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Softmax regression with the same penalty convention, solved by L-BFGS.
// Classes absent from `labels` still get a row.
MultinomialFit fit_multinomial(const Eigen::MatrixXd& features, std::span<const int> labels, int n_classes,
                               const ProbeOptions& opts = {});
std::vector<int> predict_multinomial(const MultinomialFit& fit, const Eigen::MatrixXd& features);

inline constexpr double kLogPosteriorFloor = 1e-12;

// Elementwise log(max(p, floor)).
Eigen::MatrixXd clipped_log(const Eigen::MatrixXd& probs, double floor = kLogPosteriorFloor);

enum class PosteriorGauge {
  none,      // regress on the clipped log-posteriors as given
  centered,  // subtract each row's mean first
};

struct AffineFit {
  Eigen::MatrixXd A;  // d x l
  Eigen::VectorXd k;  // d
  PosteriorGauge gauge = PosteriorGauge::none;
  int effective_rank = 0;
  // Held-out R^2 per feature; NaN where the held-out feature is constant.
  Eigen::VectorXd r_squared;
  double mean_r_squared = 0.0;  // over scored outputs, 0 if none
  int n_scored = 0;
  bool degenerate = false;  // no scored outputs
};

// Least squares of features on [log_posteriors, 1] via a complete
// orthogonal decomposition (minimum-norm solution when rank deficient).
// R^2 is filled on the training data.
AffineFit fit_affine(const Eigen::MatrixXd& features, const Eigen::MatrixXd& log_posteriors,
                     PosteriorGauge gauge = PosteriorGauge::none);
// Same fit, R^2 scored on the held-out pair.
AffineFit fit_affine(const Eigen::MatrixXd& fit_features, const Eigen::MatrixXd& fit_log_posteriors,
                     const Eigen::MatrixXd& test_features, const Eigen::MatrixXd& test_log_posteriors,
                     PosteriorGauge gauge = PosteriorGauge::none);
void score_affine(AffineFit& fit, const Eigen::MatrixXd& features, const Eigen::MatrixXd& log_posteriors);
Eigen::MatrixXd predict_affine(const AffineFit& fit, const Eigen::MatrixXd& log_posteriors);

struct IdentityReport {
  Eigen::MatrixXd product;
  double diag_mean_abs = 0.0;
  double offdiag_mean_abs = 0.0;
  int row_argmax_hits = 0;
  double dominance_ratio = 0.0;  // capped at kDominanceCap
};

inline constexpr double kDominanceCap = 1e12;

// Diagnostics of a square matrix against the identity. Row argmax is by
// signed value.
IdentityReport summarize_product(Eigen::MatrixXd product);

// Probe rows (l x d) and concept columns of A (d x l) are L2-normalized,
// then product = W_hat * A_hat. Throws ParameterError on a zero row/column.
IdentityReport identity_check(const Eigen::MatrixXd& A, const Eigen::MatrixXd& W);

void write_product_csv(std::ostream& os, const Eigen::MatrixXd& product,
                       std::span<const std::string> labels = {});

struct SteeringResult {
  Eigen::VectorXd steered;
  std::optional<Eigen::VectorXd> decoded_shift;  // absent when A is rank deficient
};

// steered = f + alpha * A[:, i]; the shift is decoded through pinv(A).
SteeringResult apply_steering(const Eigen::VectorXd& feature, const AffineFit& fit, int variable, double alpha);

// Features of two inputs whose latent configurations differ in one bit,
// with the oracle's marginal log p(c_i = 1 | x) at each.
struct FeaturePair {
  std::uint32_t config0 = 0;
  std::uint32_t config1 = 0;
  Eigen::VectorXd f0;
  Eigen::VectorXd f1;
  double log_p1_at_x0 = 0.0;
  double log_p1_at_x1 = 0.0;
};

struct ConceptDirection {
  Eigen::VectorXd direction;  // mean of f(c_i = 1) - f(c_i = 0)
  double scale = 0.0;         // mean change of log p(c_i = 1 | x) across the pairs
  int n_pairs = 0;
};

// Each pair is taken as f(c_i = 1) - f(c_i = 0) whichever order it is
// given in. Throws ParameterError if a pair differs in anything but bit
// `variable`.
ConceptDirection concept_direction(std::span<const FeaturePair> pairs, int variable);

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

}  // namespace latentid
