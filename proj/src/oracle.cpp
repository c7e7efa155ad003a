#include "latentid/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>

#include "latentid/errors.hpp"

namespace latentid {

GenerativeModel::GenerativeModel(LatentModel latent, MixingMap mixing)
    : latent_(std::move(latent)), mixing_(std::move(mixing)) {
  mixing_.validate();
  if (mixing_.n_latent != latent_.n_latent()) {
    throw ModelError("generative model: mixing.n_latent (" + std::to_string(mixing_.n_latent) +
                     ") != dag.n_nodes (" + std::to_string(latent_.n_latent()) + ")");
  }
  prior_ = enumerate_joint(latent_.dag, latent_.cpds);
  observed_.reserve(prior_.size());
  for (std::uint32_t c = 0; c < prior_.size(); ++c) observed_.push_back(apply_mixing_index(mixing_, c));
}

int GenerativeModel::target_value(std::uint32_t config, std::span<const int> positions) const {
  const Bits& x = observed_[config];
  int y = 0;
  for (std::size_t k = 0; k < positions.size(); ++k) {
    if (x[static_cast<std::size_t>(positions[k])]) y |= (1 << k);
  }
  return y;
}

Evidence context_of(const MaskedInput& masked) {
  Evidence e;
  for (std::size_t i = 0; i < masked.visible.size(); ++i) {
    if (!masked.mask_indicator[i]) {
      e.positions.push_back(static_cast<int>(i));
      e.values.push_back(masked.visible[i]);
    }
  }
  return e;
}

std::vector<std::uint32_t> PosteriorTable::support() const {
  std::vector<std::uint32_t> out;
  for (std::uint32_t c = 0; c < probs.size(); ++c) {
    if (probs[c] > 0.0) out.push_back(c);
  }
  return out;
}

namespace {

bool matches(const Bits& x, const Evidence& e) {
  for (std::size_t k = 0; k < e.positions.size(); ++k) {
    if (x[static_cast<std::size_t>(e.positions[k])] != e.values[k]) return false;
  }
  return true;
}

void check_positions(const GenerativeModel& model, std::span<const int> positions) {
  for (int p : positions) {
    if (p < 0 || p >= model.n_observed()) {
      throw ParameterError("oracle: observed position " + std::to_string(p) + " out of range");
    }
  }
}

void normalize_or_throw(std::vector<double>& probs, const char* what) {
  double z = 0.0;
  for (double p : probs) z += p;
  if (!(z > 0.0)) throw EmptySupportError(std::string(what) + ": evidence has zero probability");
  for (double& p : probs) p /= z;
}

}  // namespace

PosteriorTable posterior_given_evidence(const GenerativeModel& model, const Evidence& evidence) {
  check_positions(model, evidence.positions);
  if (evidence.positions.size() != evidence.values.size()) {
    throw ParameterError("oracle: evidence positions and values differ in length");
  }
  PosteriorTable t;
  t.kind = evidence.positions.empty() ? PosteriorKind::prior : PosteriorKind::c_given_x;
  t.probs.assign(model.n_configs(), 0.0);
  for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
    if (matches(model.observed(c), evidence)) t.probs[c] = model.prior()[c];
  }
  normalize_or_throw(t.probs, "posterior_c_given_x");
  return t;
}

PosteriorTable posterior_c_given_x(const GenerativeModel& model, std::span<const std::uint8_t> x) {
  if (static_cast<int>(x.size()) != model.n_observed()) {
    throw ParameterError("posterior_c_given_x: observed vector has length " + std::to_string(x.size()) +
                         ", expected " + std::to_string(model.n_observed()));
  }
  Evidence e;
  for (std::size_t i = 0; i < x.size(); ++i) {
    e.positions.push_back(static_cast<int>(i));
    e.values.push_back(x[i]);
  }
  auto t = posterior_given_evidence(model, e);
  t.kind = PosteriorKind::c_given_x;
  return t;
}

PosteriorTable posterior_c_given_x(const GenerativeModel& model, const MaskedInput& masked) {
  if (static_cast<int>(masked.visible.size()) != model.n_observed()) {
    throw ParameterError("posterior_c_given_x: masked input length mismatch");
  }
  return posterior_given_evidence(model, context_of(masked));
}

std::vector<double> predictive_y_given_x(const GenerativeModel& model, const MaskedInput& masked) {
  const auto post = posterior_c_given_x(model, masked);
  std::vector<double> out(static_cast<std::size_t>(masked.n_classes()), 0.0);
  for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
    if (post.probs[c] == 0.0) continue;
    // p(y|c) is the indicator of the masked bits' value under c.
    out[static_cast<std::size_t>(model.target_value(c, masked.masked_positions))] += post.probs[c];
  }
  return out;
}

std::vector<double> predictive_joint_ratio(const GenerativeModel& model, const MaskedInput& masked) {
  if (static_cast<int>(masked.visible.size()) != model.n_observed()) {
    throw ParameterError("predictive_joint_ratio: masked input length mismatch");
  }
  const Evidence ctx = context_of(masked);
  std::vector<double> joint(static_cast<std::size_t>(masked.n_classes()), 0.0);
  double px = 0.0;
  for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
    if (!matches(model.observed(c), ctx)) continue;
    px += model.prior()[c];
    joint[static_cast<std::size_t>(model.target_value(c, masked.masked_positions))] += model.prior()[c];
  }
  if (!(px > 0.0)) throw EmptySupportError("predictive_joint_ratio: context has zero probability");
  for (double& v : joint) v /= px;
  return joint;
}

PosteriorTable posterior_c_given_y(const GenerativeModel& model, std::span<const int> target_positions,
                                   int y_value) {
  check_positions(model, target_positions);
  PosteriorTable t;
  t.kind = PosteriorKind::c_given_y;
  t.probs.assign(model.n_configs(), 0.0);
  for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
    if (model.target_value(c, target_positions) == y_value) t.probs[c] = model.prior()[c];
  }
  normalize_or_throw(t.probs, "posterior_c_given_y");
  return t;
}

double entropy_bits(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log2(v);
  }
  return h;
}

double conditional_entropy(const GenerativeModel& model, std::span<const int> positions) {
  check_positions(model, positions);
  // x is a deterministic function of c, so group configurations by x.
  std::map<Bits, std::vector<double>> groups;
  for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
    const double pc = model.prior()[c];
    if (pc == 0.0) continue;
    Bits key;
    key.reserve(positions.size());
    for (int p : positions) key.push_back(model.observed(c)[static_cast<std::size_t>(p)]);
    groups[key].push_back(pc);
  }
  double h = 0.0;
  for (auto& [x, probs] : groups) {
    double px = 0.0;
    for (double v : probs) px += v;
    for (double& v : probs) v /= px;
    h += px * entropy_bits(probs);
  }
  return std::max(0.0, h);
}

double conditional_entropy(const GenerativeModel& model) {
  std::vector<int> all(static_cast<std::size_t>(model.n_observed()));
  for (int i = 0; i < model.n_observed(); ++i) all[static_cast<std::size_t>(i)] = i;
  return conditional_entropy(model, all);
}

DiversityMatrices diversity_L(const GenerativeModel& model, std::span<const int> target_positions,
                              std::span<const int> y_values, double tol) {
  const int ell = static_cast<int>(model.n_configs());
  DiversityMatrices out;
  out.y_values.assign(y_values.begin(), y_values.end());
  out.L = Eigen::MatrixXd::Zero(ell, ell);
  if (y_values.empty()) throw ParameterError("diversity_L: no target values");

  std::vector<PosteriorTable> posts;
  posts.reserve(y_values.size());
  for (int y : y_values) posts.push_back(posterior_c_given_y(model, target_positions, y));

  const std::set<int> distinct(y_values.begin(), y_values.end());
  out.enough_values = static_cast<int>(y_values.size()) == ell + 1 &&
                      static_cast<int>(distinct.size()) == ell + 1;

  const int cols = std::min<int>(ell, static_cast<int>(y_values.size()) - 1);
  for (int j = 0; j < cols; ++j) {
    for (int c = 0; c < ell; ++c) {
      out.L(c, j) = posts[static_cast<std::size_t>(j + 1)].probs[static_cast<std::size_t>(c)] -
                    posts[0].probs[static_cast<std::size_t>(c)];
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.L);
  out.singular_values = svd.singularValues();
  out.min_singular_value = out.singular_values.minCoeff();
  out.rank = static_cast<int>((out.singular_values.array() > tol).count());
  out.invertible = out.enough_values && out.min_singular_value > tol;
  return out;
}

double jensen_gap_exact(std::span<const double> p, std::span<const double> g) {
  if (p.size() != g.size()) throw ParameterError("jensen_gap_exact: p and g differ in length");
  double mean = 0.0;
  double mean_log = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (!(g[i] > 0.0)) {
      throw DomainError("jensen_gap_exact: g must be positive on the support of p (index " +
                        std::to_string(i) + ")");
    }
    mean += p[i] * g[i];
    mean_log += p[i] * std::log(g[i]);
  }
  // Rounding can push a zero gap slightly negative.
  return std::max(0.0, std::log(mean) - mean_log);
}

JensenBound jensen_gap_bound(std::span<const double> p, std::span<const double> t,
                             const std::function<double(double)>& f, double alpha, double n_order) {
  if (p.size() != t.size()) throw ParameterError("jensen_gap_bound: p and t differ in length");
  if (!(alpha > 0.0) || !(n_order >= alpha)) {
    throw ParameterError("jensen_gap_bound: need alpha > 0 and n_order >= alpha");
  }
  JensenBound jb;
  jb.alpha = alpha;
  jb.n_order = n_order;
  double mu = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) mu += p[i] * t[i];
  const double f_mu = f(mu);
  double ef = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    const double ft = f(t[i]);
    const double dist = std::abs(t[i] - mu);
    ef += p[i] * ft;
    jb.sigma_alpha += p[i] * std::pow(dist, alpha);
    jb.sigma_n += p[i] * std::pow(std::abs(t[i]), n_order);
    if (dist > 0.0) {
      jb.M = std::max(jb.M, std::abs(ft - f_mu) / (std::pow(dist, alpha) + std::pow(dist, n_order)));
    }
  }
  jb.exact_gap = std::abs(ef - f_mu);
  jb.bound = jb.M * (jb.sigma_alpha + jb.sigma_n);
  return jb;
}

std::vector<GapSweepRow> jensen_gap_sweep(const GenerativeModel& model, std::span<const int> schedule,
                                          std::span<const int> sizes) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<GapSweepRow> rows;
  for (int m : sizes) {
    if (m < 1 || m > static_cast<int>(schedule.size())) {
      throw ParameterError("jensen_gap_sweep: subset size " + std::to_string(m) + " out of range");
    }
    const std::vector<int> subset(schedule.begin(), schedule.begin() + m);
    GapSweepRow row;
    row.m = m;
    row.n_bits = model.n_latent();
    row.H_c_given_x = conditional_entropy(model, subset);

    double gap_total = 0.0;
    double finite_mass = 0.0;
    for (int j = 0; j < m; ++j) {
      const int y_pos = subset[static_cast<std::size_t>(j)];
      Evidence ctx;
      for (int k = 0; k < m; ++k) {
        if (k != j) ctx.positions.push_back(subset[static_cast<std::size_t>(k)]);
      }
      // Reachable (context, y) pairs with their probability.
      std::map<std::pair<Bits, int>, double> pairs;
      for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
        if (model.prior()[c] == 0.0) continue;
        Bits key;
        for (int p : ctx.positions) key.push_back(model.observed(c)[static_cast<std::size_t>(p)]);
        pairs[{key, model.observed(c)[static_cast<std::size_t>(y_pos)]}] += model.prior()[c];
      }
      double gap_pos = 0.0;
      for (const auto& [xy, pxy] : pairs) {
        ctx.values = xy.first;
        const auto pcx = posterior_given_evidence(model, ctx);
        const auto pcy = posterior_c_given_y(model, y_pos, xy.second);
        std::vector<double> w;
        std::vector<double> g;
        for (std::uint32_t c = 0; c < model.n_configs(); ++c) {
          if (pcy.probs[c] == 0.0) continue;
          const double py_c = model.observed(c)[static_cast<std::size_t>(y_pos)] == xy.second ? 1.0 : 0.0;
          w.push_back(pcy.probs[c]);
          g.push_back(py_c * pcx.probs[c] / pcy.probs[c]);
        }
        double gap = inf;
        try {
          gap = jensen_gap_exact(w, g);
        } catch (const DomainError&) {
        }
        if (std::isfinite(gap)) {
          finite_mass += pxy;
          const auto jb = jensen_gap_bound(w, g, [](double v) { return std::log(v); }, 1.0, 2.0);
          if (std::isfinite(jb.bound)) {
            ++row.bound_checked;
            if (gap > jb.bound + 1e-9) ++row.bound_violations;
          }
        }
        gap_pos += pxy * gap;
      }
      gap_total += gap_pos;
    }
    row.mean_gap = gap_total / m;
    row.finite_fraction = finite_mass / m;
    rows.push_back(row);
  }
  return rows;
}

void write_posterior_csv(std::ostream& os, const PosteriorTable& table) {
  os << "config_index,prob\n" << std::setprecision(17);
  for (std::size_t c = 0; c < table.probs.size(); ++c) os << c << ',' << table.probs[c] << '\n';
}

void write_gap_sweep_csv(std::ostream& os, std::span<const GapSweepRow> rows) {
  os << "m,n_bits,mean_gap,H_c_given_x\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.m << ',' << r.n_bits << ',' << r.mean_gap << ',' << r.H_c_given_x << '\n';
}

}  // namespace latentid
