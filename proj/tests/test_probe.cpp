#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "latentid/errors.hpp"
#include "latentid/probe.hpp"

using namespace latentid;

namespace {

Eigen::MatrixXd gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  }
  return m;
}

// Delta posteriors over `ell` configurations, clipped: one row per sample.
Eigen::MatrixXd delta_log_posteriors(const std::vector<int>& configs, int ell) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(configs.size()), ell);
  for (std::size_t r = 0; r < configs.size(); ++r) p(static_cast<Eigen::Index>(r), configs[r]) = 1.0;
  return clipped_log(p);
}

// Gradient of sum log-loss + l2/2 |w|^2 for one logistic column, written out directly.
Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                  double b, double l2, double* gb) {
  Eigen::VectorXd g = l2 * w;
  *gb = 0.0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double z = X.row(i).dot(w) + b;
    const double p = 1.0 / (1.0 + std::exp(-z));
    g += (p - y(i)) * X.row(i).transpose();
    *gb += p - y(i);
  }
  return g;
}

}  // namespace

TEST_CASE("probe recovers labels used as features") {
  std::mt19937_64 rng(1);
  LabelMatrix Y(200, 3);
  for (Eigen::Index i = 0; i < 200; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) Y(i, j) = static_cast<std::uint8_t>(rng() & 1u);
  }
  const Eigen::MatrixXd X = Y.cast<double>();
  const auto r = fit_probe(X.topRows(100), Y.topRows(100), X.bottomRows(100), Y.bottomRows(100));
  CHECK(r.accuracy == 1.0);
  CHECK(r.joint_accuracy == 1.0);
  CHECK_FALSE(r.any_degenerate);
}

TEST_CASE("probe on noise features reaches about the majority rate") {
  std::mt19937_64 rng(2);
  const Eigen::Index N = 4000;
  const Eigen::MatrixXd X = gaussian(N, 5, rng);
  std::bernoulli_distribution b0(0.7);
  std::bernoulli_distribution b1(0.4);
  LabelMatrix Y(N, 2);
  for (Eigen::Index i = 0; i < N; ++i) {
    Y(i, 0) = b0(rng);
    Y(i, 1) = b1(rng);
  }
  const auto r = fit_probe(X.topRows(N / 2), Y.topRows(N / 2), X.bottomRows(N / 2), Y.bottomRows(N / 2));
  CHECK(std::abs(r.per_variable_accuracy[0] - 0.7) < 0.04);
  CHECK(std::abs(r.per_variable_accuracy[1] - 0.6) < 0.04);
}

TEST_CASE("logistic probe satisfies the optimality condition") {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd X = gaussian(300, 4, rng);
  const Eigen::VectorXd w0 = Eigen::VectorXd::LinSpaced(4, -1.0, 2.0);
  LabelMatrix Y(300, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < 300; ++i) Y(i, 0) = u(rng) < 1.0 / (1.0 + std::exp(-X.row(i).dot(w0)));
  for (double l2 : {0.1, 1.0, 10.0}) {
    const auto w = fit_probe(X, Y, {.l2 = l2, .max_iter = 500, .tol = 1e-10});
    double gb = 0.0;
    const auto g = logistic_gradient(X, Y.col(0).cast<double>(), w.W.row(0).transpose(), w.bias(0), l2, &gb);
    CHECK(g.cwiseAbs().maxCoeff() < 1e-6);
    CHECK(std::abs(gb) < 1e-6);
  }
}

TEST_CASE("single-class label column is flagged") {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd X = gaussian(50, 3, rng);
  LabelMatrix Y = LabelMatrix::Ones(50, 2);
  for (Eigen::Index i = 0; i < 50; ++i) Y(i, 1) = static_cast<std::uint8_t>(X(i, 0) > 0);
  const auto w = fit_probe(X, Y);
  CHECK(w.degenerate[0]);
  CHECK_FALSE(w.degenerate[1]);
  CHECK(w.constant_label[0] == 1);
  const auto r = evaluate_probe(w, X, Y);
  CHECK(r.per_variable_accuracy[0] == 1.0);
  CHECK(r.any_degenerate);
}

TEST_CASE("multinomial fit separates clusters and is stationary") {
  std::mt19937_64 rng(5);
  const int K = 5;
  const Eigen::MatrixXd centers = 4.0 * gaussian(K, 6, rng);
  Eigen::MatrixXd X(250, 6);
  std::vector<int> labels(250);
  std::normal_distribution<double> n(0.0, 0.3);
  for (int i = 0; i < 250; ++i) {
    labels[static_cast<std::size_t>(i)] = i % K;
    for (int j = 0; j < 6; ++j) X(i, j) = centers(i % K, j) + n(rng);
  }
  const auto fit = fit_multinomial(X, labels, K, {.l2 = 1.0, .max_iter = 1000, .tol = 1e-9});
  CHECK(fit.train_accuracy == 1.0);
  CHECK(predict_multinomial(fit, X) == labels);

  // Gradient of the penalized objective, by hand.
  Eigen::MatrixXd gW = fit.W;  // l2 = 1
  Eigen::VectorXd gb = Eigen::VectorXd::Zero(K);
  for (int i = 0; i < 250; ++i) {
    Eigen::VectorXd z = fit.W * X.row(i).transpose() + fit.bias;
    z.array() -= z.maxCoeff();
    Eigen::VectorXd p = z.array().exp();
    p /= p.sum();
    p(labels[static_cast<std::size_t>(i)]) -= 1.0;
    gW += p * X.row(i);
    gb += p;
  }
  CHECK(gW.cwiseAbs().maxCoeff() < 1e-4 * std::max(1.0, std::abs(fit.objective)));
  CHECK(gb.cwiseAbs().maxCoeff() < 1e-4 * std::max(1.0, std::abs(fit.objective)));
}

TEST_CASE("clipped log floor") {
  Eigen::MatrixXd p(1, 3);
  p << 0.0, 0.5, 1.0;
  const auto l = clipped_log(p);
  CHECK(l(0, 0) == doctest::Approx(std::log(1e-12)));
  CHECK(l(0, 1) == doctest::Approx(std::log(0.5)));
  CHECK(l(0, 2) == 0.0);
}

TEST_CASE("affine fit recovers an exact affine model") {
  std::mt19937_64 rng(6);
  const int ell = 5;
  const int d = 9;
  Eigen::MatrixXd P = gaussian(120, ell, rng).array().exp();
  for (Eigen::Index i = 0; i < P.rows(); ++i) P.row(i) /= P.row(i).sum();
  const Eigen::MatrixXd L = clipped_log(P);
  const Eigen::MatrixXd A0 = gaussian(d, ell, rng);
  const Eigen::VectorXd k0 = gaussian(d, 1, rng);
  const Eigen::MatrixXd F = (L * A0.transpose()).rowwise() + k0.transpose();
  const auto fit = fit_affine(F.topRows(60), L.topRows(60), F.bottomRows(60), L.bottomRows(60));
  CHECK((fit.A - A0).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((fit.k - k0).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(fit.mean_r_squared == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fit.effective_rank == ell + 1);
  CHECK((predict_affine(fit, L) - F).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("affine fit on rank-deficient regressors") {
  std::mt19937_64 rng(7);
  const std::vector<int> configs{0, 1, 2, 0, 1, 2, 1, 0};
  const Eigen::MatrixXd L = delta_log_posteriors(configs, 4);  // config 3 never appears
  const Eigen::MatrixXd F = gaussian(4, 3, rng)(Eigen::all, configs).transpose();
  const auto fit = fit_affine(F, delta_log_posteriors(configs, 4));
  CHECK(fit.effective_rank < 5);
  CHECK(fit.A.allFinite());
  CHECK(fit.mean_r_squared == doctest::Approx(1.0));
  (void)L;
}

TEST_CASE("constant held-out outputs are not scored") {
  const std::vector<int> configs{0, 1, 0, 1};
  const Eigen::MatrixXd L = delta_log_posteriors(configs, 2);
  Eigen::MatrixXd F(4, 2);
  F << 1, 5, 2, 5, 1, 5, 2, 5;
  const auto fit = fit_affine(F, L);
  CHECK(std::isnan(fit.r_squared(1)));
  CHECK(fit.n_scored == 1);
  const Eigen::MatrixXd flat = Eigen::MatrixXd::Constant(4, 2, 3.0);
  const auto deg = fit_affine(flat, L);
  CHECK(deg.degenerate);
  CHECK(deg.mean_r_squared == 0.0);
}

TEST_CASE("identity check") {
  std::mt19937_64 rng(8);
  SUBCASE("inverse pair gives the identity with capped dominance") {
    const Eigen::MatrixXd Q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(6, 6, rng)).householderQ();
    const auto r = identity_check(Q, Q.inverse());
    CHECK((r.product - Eigen::MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(r.row_argmax_hits == 6);
    CHECK(r.dominance_ratio == kDominanceCap);

    // A general inverse stays diagonal after normalization, with positive entries.
    const Eigen::MatrixXd A = gaussian(6, 6, rng);
    const auto g = identity_check(A, A.inverse());
    CHECK(g.offdiag_mean_abs < 1e-12);
    CHECK(g.product.diagonal().minCoeff() > 0.0);
    CHECK(g.row_argmax_hits == 6);
    CHECK(g.dominance_ratio == kDominanceCap);
  }
  SUBCASE("random pairs average near one") {
    double diag = 0.0;
    double off = 0.0;
    for (int t = 0; t < 1000; ++t) {
      const auto r = identity_check(gaussian(10, 6, rng), gaussian(6, 10, rng));
      CHECK(r.row_argmax_hits <= 6);
      diag += r.diag_mean_abs;
      off += r.offdiag_mean_abs;
    }
    CHECK(diag / off == doctest::Approx(1.0).epsilon(0.1));
  }
  SUBCASE("zero rows are rejected") {
    Eigen::MatrixXd W = gaussian(3, 4, rng);
    W.row(1).setZero();
    CHECK_THROWS_AS(identity_check(gaussian(4, 3, rng), W), ParameterError);
  }
}

TEST_CASE("probe on exact affine features inverts the affine map") {
  std::mt19937_64 rng(9);
  const int ell = 8;
  const int d = 16;
  std::vector<int> configs;
  for (int i = 0; i < 400; ++i) configs.push_back(static_cast<int>(rng() % ell));
  const Eigen::MatrixXd L = delta_log_posteriors(configs, ell);
  const Eigen::MatrixXd A0 = gaussian(d, ell, rng);
  const Eigen::MatrixXd F = (L * A0.transpose()).rowwise() + gaussian(1, d, rng).row(0);
  for (double gamma : {1.0, 3.0}) {
    const Eigen::MatrixXd X = gamma * F;
    const auto W = fit_multinomial(X, configs, ell);
    const auto A = fit_affine(X, L, PosteriorGauge::centered);
    const auto r = identity_check(A.A, W.W);
    CHECK(r.row_argmax_hits == ell);
    CHECK(r.dominance_ratio > 3.0);
  }
}

TEST_CASE("summaries and product csv") {
  Eigen::MatrixXd m(2, 2);
  m << 1.0, -0.5, 0.25, 2.0;
  const auto r = summarize_product(m);
  CHECK(r.diag_mean_abs == doctest::Approx(1.5));
  CHECK(r.offdiag_mean_abs == doctest::Approx(0.375));
  CHECK(r.dominance_ratio == doctest::Approx(4.0));
  CHECK(r.row_argmax_hits == 2);
  std::ostringstream os;
  const std::vector<std::string> labels{"a", "b"};
  write_product_csv(os, m, labels);
  CHECK(os.str().rfind("row,a,b\na,1,-0.5\n", 0) == 0);
}

TEST_CASE("steering") {
  std::mt19937_64 rng(10);
  const int ell = 4;
  const int d = 7;
  Eigen::MatrixXd P = gaussian(50, ell, rng).array().exp();
  for (Eigen::Index i = 0; i < P.rows(); ++i) P.row(i) /= P.row(i).sum();
  const Eigen::MatrixXd L = clipped_log(P);
  const Eigen::MatrixXd A0 = gaussian(d, ell, rng);
  const Eigen::MatrixXd F = (L * A0.transpose()).rowwise() + gaussian(1, d, rng).row(0);
  const auto fit = fit_affine(F, L);
  const Eigen::VectorXd f = F.row(3).transpose();

  const auto zero = apply_steering(f, fit, 2, 0.0);
  CHECK(zero.steered == f);
  REQUIRE(zero.decoded_shift);
  CHECK(zero.decoded_shift->norm() < 1e-12);

  for (int i = 0; i < ell; ++i) {
    for (double alpha : {1.0, -2.5}) {
      const auto s = apply_steering(f, fit, i, alpha);
      REQUIRE(s.decoded_shift);
      CHECK((*s.decoded_shift - alpha * Eigen::VectorXd::Unit(ell, i)).cwiseAbs().maxCoeff() < 1e-6);
    }
  }

  AffineFit flat = fit;
  flat.A.col(1) = flat.A.col(0);
  const auto s = apply_steering(f, flat, 0, 1.0);
  CHECK_FALSE(s.decoded_shift.has_value());
  CHECK((s.steered - f - flat.A.col(0)).norm() < 1e-12);
}

TEST_CASE("concept direction on exact features") {
  std::mt19937_64 rng(11);
  const int n = 3;
  const int d = 6;
  const Eigen::MatrixXd A0 = gaussian(d, n, rng);
  const Eigen::VectorXd k0 = gaussian(d, 1, rng);
  // Invertible regime: the marginal log p(c_i = 1 | x) is 0 or the floor.
  const double lo = std::log(kLogPosteriorFloor);
  auto marg = [&](std::uint32_t c) {
    Eigen::VectorXd m(n);
    for (int i = 0; i < n; ++i) m(i) = (c >> i) & 1u ? 0.0 : lo;
    return m;
  };
  auto feat = [&](std::uint32_t c) -> Eigen::VectorXd { return A0 * marg(c) + k0; };
  for (int i = 0; i < n; ++i) {
    std::vector<FeaturePair> pairs;
    for (std::uint32_t c = 0; c < 8; ++c) {
      if ((c >> i) & 1u) continue;
      const std::uint32_t c1 = c | (1u << i);
      // Alternate orientation; the direction is always c_i = 1 minus c_i = 0.
      if (c % 2) {
        pairs.push_back({c1, c, feat(c1), feat(c), marg(c1)(i), marg(c)(i)});
      } else {
        pairs.push_back({c, c1, feat(c), feat(c1), marg(c)(i), marg(c1)(i)});
      }
    }
    const auto dir = concept_direction(pairs, i);
    CHECK(dir.n_pairs == 4);
    CHECK(dir.scale == doctest::Approx(-lo));
    CHECK((dir.direction - dir.scale * A0.col(i)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(cosine_similarity(dir.direction, A0.col(i)) == doctest::Approx(1.0));
  }
  std::vector<FeaturePair> bad{{0, 3, feat(0), feat(3), 0.0, 0.0}};
  CHECK_THROWS_AS(concept_direction(bad, 0), ParameterError);
}
