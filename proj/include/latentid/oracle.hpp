#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "latentid/bits.hpp"
#include "latentid/mixing.hpp"
#include "latentid/scm.hpp"

namespace latentid {

// p(c) from the latent model and the deterministic emission x(c) from the
// mixing map, both precomputed over all 2^n configurations.
class GenerativeModel {
 public:
  GenerativeModel(LatentModel latent, MixingMap mixing);

  const LatentModel& latent() const { return latent_; }
  const MixingMap& mixing() const { return mixing_; }
  const JointTable& prior() const { return prior_; }
  int n_latent() const { return latent_.n_latent(); }
  std::uint32_t n_configs() const { return static_cast<std::uint32_t>(prior_.size()); }
  int n_observed() const { return mixing_.n_observed(); }
  const Bits& observed(std::uint32_t config) const { return observed_[config]; }

  // Joint value of the observed coordinates `positions` under config c.
  int target_value(std::uint32_t config, std::span<const int> positions) const;

 private:
  LatentModel latent_;
  MixingMap mixing_;
  JointTable prior_;
  std::vector<Bits> observed_;
};

// A subset of observed coordinates with their values.
struct Evidence {
  std::vector<int> positions;
  Bits values;
};

// Visible (unmasked) coordinates of a masked input.
Evidence context_of(const MaskedInput& masked);

enum class PosteriorKind { prior, c_given_x, c_given_y };

struct PosteriorTable {
  PosteriorKind kind = PosteriorKind::prior;
  std::vector<double> probs;  // length 2^n, indexed by configuration

  std::vector<std::uint32_t> support() const;
};

PosteriorTable posterior_given_evidence(const GenerativeModel& model, const Evidence& evidence);
// x is a full observed vector (all selected coordinates).
PosteriorTable posterior_c_given_x(const GenerativeModel& model, std::span<const std::uint8_t> x);
// Conditions on the visible coordinates only.
PosteriorTable posterior_c_given_x(const GenerativeModel& model, const MaskedInput& masked);

// p(y | x) = sum_c p(y|c) p(c|x), over the masked target's n_classes values.
std::vector<double> predictive_y_given_x(const GenerativeModel& model, const MaskedInput& masked);
// Same quantity by direct enumeration of p(x, y) / p(x).
std::vector<double> predictive_joint_ratio(const GenerativeModel& model, const MaskedInput& masked);

PosteriorTable posterior_c_given_y(const GenerativeModel& model, std::span<const int> target_positions,
                                   int y_value);
inline PosteriorTable posterior_c_given_y(const GenerativeModel& model, int mask_pos, int y_value) {
  const int pos[1] = {mask_pos};
  return posterior_c_given_y(model, pos, y_value);
}

// Shannon entropy in bits, 0 log 0 = 0.
double entropy_bits(std::span<const double> p);

// H(c | x) in bits, x = all selected coordinates, or only `positions`.
double conditional_entropy(const GenerativeModel& model);
double conditional_entropy(const GenerativeModel& model, std::span<const int> positions);

struct DiversityMatrices {
  std::vector<int> y_values;
  Eigen::MatrixXd L;  // column j-1 = p(c|y_j) - p(c|y_0)
  Eigen::VectorXd singular_values;
  double min_singular_value = 0.0;
  int rank = 0;
  bool invertible = false;
  // False when fewer than l+1 distinct target values were supplied.
  bool enough_values = false;
};

inline constexpr double kSingularTolerance = 1e-8;

DiversityMatrices diversity_L(const GenerativeModel& model, std::span<const int> target_positions,
                              std::span<const int> y_values, double tol = kSingularTolerance);

// log(sum p g) - sum p log g over the support of p.
double jensen_gap_exact(std::span<const double> p, std::span<const double> g);

struct JensenBound {
  double exact_gap = 0.0;
  double bound = 0.0;
  double M = 0.0;
  double sigma_alpha = 0.0;  // E|t - mu|^alpha
  double sigma_n = 0.0;      // E|t|^n
  double alpha = 0.0;
  double n_order = 0.0;
};

// |E f(t) - f(E t)| <= M (E|t-mu|^alpha + E|t|^n), with M the largest
// |f(t) - f(mu)| / (|t-mu|^alpha + |t-mu|^n) over support points t != mu.
JensenBound jensen_gap_bound(std::span<const double> p, std::span<const double> t,
                             const std::function<double(double)>& f, double alpha, double n_order);

struct GapSweepRow {
  int m = 0;
  int n_bits = 0;
  double mean_gap = 0.0;       // +inf if any reachable (x, y) has an infinite gap
  double finite_fraction = 0.0;
  double H_c_given_x = 0.0;
  int bound_checked = 0;       // (x, y) instances with a finite gap and bound
  int bound_violations = 0;
};

// Jensen gap of the log-sum step, averaged over reachable (context, masked
// bit) pairs for each nested prefix of `schedule`. p = p(c|y) and
// g = p(y|c) p(c|x) / p(c|y).
std::vector<GapSweepRow> jensen_gap_sweep(const GenerativeModel& model, std::span<const int> schedule,
                                          std::span<const int> sizes);

void write_posterior_csv(std::ostream& os, const PosteriorTable& table);
void write_gap_sweep_csv(std::ostream& os, std::span<const GapSweepRow> rows);

}  // namespace latentid
