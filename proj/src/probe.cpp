#include "latentid/probe.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>

#include "latentid/errors.hpp"
#include "lbfgs.hpp"

namespace latentid {

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

struct BinaryFit {
  Eigen::VectorXd w;
  double b = 0.0;
};

double binary_objective(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w, double b,
                        double l2) {
  const Eigen::VectorXd z = (X * w).array() + b;
  double f = 0.5 * l2 * w.squaredNorm();
  for (Eigen::Index i = 0; i < z.size(); ++i) f += softplus(z(i)) - y(i) * z(i);
  return f;
}

// Damped Newton on the penalized log-loss; d is small so the (d+1)^2 system
// is cheap.
BinaryFit fit_binary(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const ProbeOptions& opts) {
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  BinaryFit fit{Eigen::VectorXd::Zero(d), 0.0};
  const double prior = std::clamp(y.mean(), 1e-6, 1.0 - 1e-6);
  fit.b = std::log(prior / (1.0 - prior));
  double f = binary_objective(X, y, fit.w, fit.b, opts.l2);

  Eigen::MatrixXd Xa(n, d + 1);
  Xa.leftCols(d) = X;
  Xa.col(d).setOnes();
  for (int it = 0; it < opts.max_iter; ++it) {
    const Eigen::VectorXd z = (X * fit.w).array() + fit.b;
    const Eigen::VectorXd p = z.unaryExpr([](double v) { return sigmoid(v); });
    Eigen::VectorXd g = Xa.transpose() * (p - y);
    g.head(d) += opts.l2 * fit.w;
    if (g.lpNorm<Eigen::Infinity>() <= opts.tol * std::max(1.0, std::abs(f))) break;
    const Eigen::VectorXd s = (p.array() * (1.0 - p.array())).matrix();
    Eigen::MatrixXd H = Xa.transpose() * s.asDiagonal() * Xa;
    H.diagonal().head(d).array() += opts.l2;
    H.diagonal().array() += 1e-10;
    const Eigen::VectorXd step = H.ldlt().solve(g);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const Eigen::VectorXd w_new = fit.w - t * step.head(d);
      const double b_new = fit.b - t * step(d);
      const double f_new = binary_objective(X, y, w_new, b_new, opts.l2);
      if (f_new <= f - 1e-4 * t * g.dot(step)) {
        fit.w = w_new;
        fit.b = b_new;
        moved = f - f_new > 1e-14 * std::max(1.0, std::abs(f));
        f = f_new;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
  }
  return fit;
}

void check_rows(const Eigen::MatrixXd& features, Eigen::Index rows, const char* what) {
  if (features.rows() != rows) {
    throw ParameterError(std::string(what) + ": feature rows " + std::to_string(features.rows()) +
                         " != label rows " + std::to_string(rows));
  }
  if (!features.allFinite()) throw ParameterError(std::string(what) + ": non-finite features");
}

}  // namespace

ProbeWeights fit_probe(const Eigen::MatrixXd& features, const LabelMatrix& labels, const ProbeOptions& opts) {
  check_rows(features, labels.rows(), "fit_probe");
  if (features.rows() == 0) throw ParameterError("fit_probe: no samples");
  if (opts.l2 < 0) throw ParameterError("fit_probe: l2 must be >= 0");
  const Eigen::Index n_targets = labels.cols();
  ProbeWeights out;
  out.W = Eigen::MatrixXd::Zero(n_targets, features.cols());
  out.bias = Eigen::VectorXd::Zero(n_targets);
  out.degenerate.assign(static_cast<std::size_t>(n_targets), false);
  out.constant_label.assign(static_cast<std::size_t>(n_targets), -1);
  for (Eigen::Index j = 0; j < n_targets; ++j) {
    const Eigen::VectorXd y = labels.col(j).cast<double>();
    const double ones = y.sum();
    if (ones == 0.0 || ones == static_cast<double>(y.size())) {
      out.degenerate[static_cast<std::size_t>(j)] = true;
      out.constant_label[static_cast<std::size_t>(j)] = ones == 0.0 ? 0 : 1;
      continue;
    }
    const auto fit = fit_binary(features, y, opts);
    out.W.row(j) = fit.w.transpose();
    out.bias(j) = fit.b;
  }
  return out;
}

ProbeResult evaluate_probe(const ProbeWeights& weights, const Eigen::MatrixXd& features, const LabelMatrix& labels) {
  check_rows(features, labels.rows(), "evaluate_probe");
  if (labels.cols() != weights.W.rows()) throw ParameterError("evaluate_probe: label columns != probe targets");
  ProbeResult res;
  res.weights = weights;
  const Eigen::Index n = features.rows();
  const Eigen::Index t = labels.cols();
  if (n == 0) return res;
  const Eigen::MatrixXd z = (features * weights.W.transpose()).rowwise() + weights.bias.transpose();
  std::vector<char> all_right(static_cast<std::size_t>(n), 1);
  for (Eigen::Index j = 0; j < t; ++j) {
    const auto uj = static_cast<std::size_t>(j);
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int pred = weights.degenerate[uj] ? weights.constant_label[uj] : (z(i, j) > 0.0 ? 1 : 0);
      const bool ok = pred == labels(i, j);
      hits += ok;
      if (!ok) all_right[static_cast<std::size_t>(i)] = 0;
    }
    res.per_variable_accuracy.push_back(static_cast<double>(hits) / static_cast<double>(n));
    res.any_degenerate = res.any_degenerate || weights.degenerate[uj];
  }
  double sum = 0.0;
  for (double a : res.per_variable_accuracy) sum += a;
  res.accuracy = t ? sum / static_cast<double>(t) : 0.0;
  std::size_t joint = 0;
  for (char c : all_right) joint += static_cast<std::size_t>(c);
  res.joint_accuracy = static_cast<double>(joint) / static_cast<double>(n);
  return res;
}

ProbeResult fit_probe(const Eigen::MatrixXd& fit_features, const LabelMatrix& fit_labels,
                      const Eigen::MatrixXd& test_features, const LabelMatrix& test_labels,
                      const ProbeOptions& opts) {
  return evaluate_probe(fit_probe(fit_features, fit_labels, opts), test_features, test_labels);
}

MultinomialFit fit_multinomial(const Eigen::MatrixXd& features, std::span<const int> labels, int n_classes,
                               const ProbeOptions& opts) {
  check_rows(features, static_cast<Eigen::Index>(labels.size()), "fit_multinomial");
  if (labels.empty()) throw ParameterError("fit_multinomial: no samples");
  if (n_classes < 2) throw ParameterError("fit_multinomial: need at least 2 classes");
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw ParameterError("fit_multinomial: label out of range");
  }
  const Eigen::Index n = features.rows();
  const Eigen::Index d = features.cols();
  const Eigen::Index K = n_classes;
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, K);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;

  // x = [vec(W) (K x d, column-major); bias]
  auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const Eigen::Map<const Eigen::MatrixXd> W(x.data(), K, d);
    const auto b = x.tail(K);
    Eigen::MatrixXd Z = features * W.transpose();
    Z.rowwise() += b.transpose();
    const Eigen::VectorXd mx = Z.rowwise().maxCoeff();
    Z.colwise() -= mx;
    Eigen::MatrixXd P = Z.array().exp().matrix();
    const Eigen::VectorXd sums = P.rowwise().sum();
    const Eigen::VectorXd lse = sums.array().log().matrix();
    double f = lse.sum() - (Z.array() * onehot.array()).sum() + 0.5 * opts.l2 * W.squaredNorm();
    P.array().colwise() /= sums.array();
    P -= onehot;
    Eigen::Map<Eigen::MatrixXd> gW(g.data(), K, d);
    gW.noalias() = P.transpose() * features;
    gW += opts.l2 * W;
    g.tail(K) = P.colwise().sum().transpose();
    return f;
  };

  Eigen::VectorXd x = Eigen::VectorXd::Zero(K * d + K);
  const auto r = detail::lbfgs_minimize(objective, x, opts.max_iter, opts.tol);
  MultinomialFit fit;
  fit.W = Eigen::Map<const Eigen::MatrixXd>(x.data(), K, d);
  fit.bias = x.tail(K);
  fit.objective = r.objective;
  fit.iterations = r.iterations;
  fit.converged = r.converged;
  const auto pred = predict_multinomial(fit, features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  fit.train_accuracy = static_cast<double>(hits) / static_cast<double>(pred.size());
  return fit;
}

std::vector<int> predict_multinomial(const MultinomialFit& fit, const Eigen::MatrixXd& features) {
  const Eigen::MatrixXd Z = (features * fit.W.transpose()).rowwise() + fit.bias.transpose();
  std::vector<int> out(static_cast<std::size_t>(Z.rows()));
  for (Eigen::Index i = 0; i < Z.rows(); ++i) {
    Eigen::Index arg = 0;
    Z.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

Eigen::MatrixXd clipped_log(const Eigen::MatrixXd& probs, double floor) {
  return probs.array().max(floor).log().matrix();
}

namespace {

Eigen::MatrixXd apply_gauge(const Eigen::MatrixXd& logp, PosteriorGauge gauge) {
  if (gauge == PosteriorGauge::none) return logp;
  Eigen::MatrixXd out = logp;
  out.colwise() -= logp.rowwise().mean();
  return out;
}

}  // namespace

Eigen::MatrixXd predict_affine(const AffineFit& fit, const Eigen::MatrixXd& log_posteriors) {
  if (log_posteriors.cols() != fit.A.cols()) throw ParameterError("affine: posterior width != fit width");
  Eigen::MatrixXd out = apply_gauge(log_posteriors, fit.gauge) * fit.A.transpose();
  out.rowwise() += fit.k.transpose();
  return out;
}

void score_affine(AffineFit& fit, const Eigen::MatrixXd& features, const Eigen::MatrixXd& log_posteriors) {
  if (features.rows() != log_posteriors.rows()) throw ParameterError("affine: row count mismatch");
  if (features.cols() != fit.A.rows()) throw ParameterError("affine: feature width != fit width");
  const Eigen::MatrixXd pred = predict_affine(fit, log_posteriors);
  const Eigen::Index d = features.cols();
  fit.r_squared = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::quiet_NaN());
  fit.n_scored = 0;
  double sum = 0.0;
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto col = features.col(j);
    const double mean = col.mean();
    const double ss_tot = (col.array() - mean).square().sum();
    const double scale = std::max(1.0, mean * mean) * static_cast<double>(col.size());
    if (!(ss_tot > 1e-24 * scale)) continue;
    const double ss_res = (col - pred.col(j)).squaredNorm();
    fit.r_squared(j) = 1.0 - ss_res / ss_tot;
    sum += fit.r_squared(j);
    ++fit.n_scored;
  }
  fit.degenerate = fit.n_scored == 0;
  fit.mean_r_squared = fit.n_scored ? sum / fit.n_scored : 0.0;
}

AffineFit fit_affine(const Eigen::MatrixXd& features, const Eigen::MatrixXd& log_posteriors, PosteriorGauge gauge) {
  if (features.rows() != log_posteriors.rows()) throw ParameterError("fit_affine: row count mismatch");
  if (features.rows() == 0) throw ParameterError("fit_affine: no samples");
  if (!log_posteriors.allFinite()) throw ParameterError("fit_affine: non-finite log-posteriors (clip first)");
  if (!features.allFinite()) throw ParameterError("fit_affine: non-finite features");
  const Eigen::Index l = log_posteriors.cols();
  Eigen::MatrixXd design(features.rows(), l + 1);
  design.leftCols(l) = apply_gauge(log_posteriors, gauge);
  design.col(l).setOnes();
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
  const Eigen::MatrixXd coef = cod.solve(features);  // (l+1) x d
  AffineFit fit;
  fit.gauge = gauge;
  fit.A = coef.topRows(l).transpose();
  fit.k = coef.row(l).transpose();
  fit.effective_rank = static_cast<int>(cod.rank());
  score_affine(fit, features, log_posteriors);
  return fit;
}

AffineFit fit_affine(const Eigen::MatrixXd& fit_features, const Eigen::MatrixXd& fit_log_posteriors,
                     const Eigen::MatrixXd& test_features, const Eigen::MatrixXd& test_log_posteriors,
                     PosteriorGauge gauge) {
  AffineFit fit = fit_affine(fit_features, fit_log_posteriors, gauge);
  score_affine(fit, test_features, test_log_posteriors);
  return fit;
}

IdentityReport summarize_product(Eigen::MatrixXd product) {
  if (product.rows() != product.cols() || product.rows() == 0) {
    throw ParameterError("identity: product must be a nonempty square matrix");
  }
  IdentityReport r;
  const Eigen::Index n = product.rows();
  r.diag_mean_abs = product.diagonal().cwiseAbs().mean();
  r.offdiag_mean_abs =
      n > 1 ? (product.cwiseAbs().sum() - product.diagonal().cwiseAbs().sum()) / static_cast<double>(n * (n - 1))
            : 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index arg = 0;
    product.row(i).maxCoeff(&arg);
    r.row_argmax_hits += arg == i;
  }
  if (r.offdiag_mean_abs * kDominanceCap <= r.diag_mean_abs) {
    r.dominance_ratio = kDominanceCap;
  } else {
    r.dominance_ratio = r.diag_mean_abs / r.offdiag_mean_abs;
  }
  r.product = std::move(product);
  return r;
}

IdentityReport identity_check(const Eigen::MatrixXd& A, const Eigen::MatrixXd& W) {
  if (W.cols() != A.rows() || W.rows() != A.cols()) {
    throw ParameterError("identity_check: W is " + std::to_string(W.rows()) + "x" + std::to_string(W.cols()) +
                         ", A is " + std::to_string(A.rows()) + "x" + std::to_string(A.cols()));
  }
  Eigen::MatrixXd Wn = W;
  Eigen::MatrixXd An = A;
  for (Eigen::Index i = 0; i < Wn.rows(); ++i) {
    const double norm = Wn.row(i).norm();
    if (norm == 0.0) throw ParameterError("identity_check: probe row " + std::to_string(i) + " is zero");
    Wn.row(i) /= norm;
  }
  for (Eigen::Index j = 0; j < An.cols(); ++j) {
    const double norm = An.col(j).norm();
    if (norm == 0.0) throw ParameterError("identity_check: concept column " + std::to_string(j) + " is zero");
    An.col(j) /= norm;
  }
  return summarize_product(Wn * An);
}

void write_product_csv(std::ostream& os, const Eigen::MatrixXd& product, std::span<const std::string> labels) {
  auto label = [&](Eigen::Index i) {
    return labels.empty() ? std::to_string(i) : labels[static_cast<std::size_t>(i)];
  };
  if (!labels.empty() && static_cast<Eigen::Index>(labels.size()) != product.rows()) {
    throw ParameterError("write_product_csv: label count != matrix size");
  }
  os << "row";
  for (Eigen::Index j = 0; j < product.cols(); ++j) os << ',' << label(j);
  os << '\n' << std::setprecision(9);
  for (Eigen::Index i = 0; i < product.rows(); ++i) {
    os << label(i);
    for (Eigen::Index j = 0; j < product.cols(); ++j) os << ',' << product(i, j);
    os << '\n';
  }
}

SteeringResult apply_steering(const Eigen::VectorXd& feature, const AffineFit& fit, int variable, double alpha) {
  if (variable < 0 || variable >= fit.A.cols()) throw ParameterError("apply_steering: concept index out of range");
  if (feature.size() != fit.A.rows()) throw ParameterError("apply_steering: feature width != fit width");
  SteeringResult res;
  res.steered = feature + alpha * fit.A.col(variable);
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(fit.A);
  if (cod.rank() == fit.A.cols()) {
    res.decoded_shift = cod.solve(res.steered - fit.k) - cod.solve(feature - fit.k);
  }
  return res;
}

ConceptDirection concept_direction(std::span<const FeaturePair> pairs, int variable) {
  if (pairs.empty()) throw ParameterError("concept_direction: no pairs");
  if (variable < 0 || variable >= 32) throw ParameterError("concept_direction: concept index out of range");
  const std::uint32_t bit = 1u << variable;
  ConceptDirection out;
  out.direction = Eigen::VectorXd::Zero(pairs.front().f0.size());
  for (const auto& p : pairs) {
    if ((p.config0 ^ p.config1) != bit) {
      throw ParameterError("concept_direction: configs " + std::to_string(p.config0) + " and " +
                           std::to_string(p.config1) + " do not differ in exactly coordinate " +
                           std::to_string(variable));
    }
    if (p.f0.size() != out.direction.size() || p.f1.size() != out.direction.size()) {
      throw ParameterError("concept_direction: feature widths differ");
    }
    const bool forward = (p.config1 & bit) != 0;
    out.direction += forward ? Eigen::VectorXd(p.f1 - p.f0) : Eigen::VectorXd(p.f0 - p.f1);
    out.scale += forward ? p.log_p1_at_x1 - p.log_p1_at_x0 : p.log_p1_at_x0 - p.log_p1_at_x1;
  }
  out.n_pairs = static_cast<int>(pairs.size());
  out.direction /= out.n_pairs;
  out.scale /= out.n_pairs;
  return out;
}

double cosine_similarity(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw ParameterError("cosine_similarity: zero vector");
  return a.dot(b) / (na * nb);
}

}  // namespace latentid
