#pragma once

#include <algorithm>
#include <cmath>
#include <deque>

#include <Eigen/Dense>

namespace latentid::detail {

struct LbfgsResult {
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Minimizes f in place with limited-memory BFGS and backtracking Armijo line
// search. `fg(x, g)` returns f(x) and writes the gradient into g.
template <class Fn>
LbfgsResult lbfgs_minimize(Fn&& fg, Eigen::VectorXd& x, int max_iter, double tol, int history = 10) {
  struct Pair {
    Eigen::VectorXd s, y;
    double rho;
  };
  std::deque<Pair> mem;
  Eigen::VectorXd g(x.size());
  double f = fg(x, g);
  LbfgsResult res;
  Eigen::VectorXd x_new(x.size());
  Eigen::VectorXd g_new(x.size());
  std::vector<double> alpha(static_cast<std::size_t>(history));

  for (int it = 0; it < max_iter; ++it) {
    if (g.lpNorm<Eigen::Infinity>() <= tol * std::max(1.0, std::abs(f))) {
      res.converged = true;
      break;
    }
    Eigen::VectorXd d = -g;
    for (int i = static_cast<int>(mem.size()) - 1; i >= 0; --i) {
      const auto& p = mem[static_cast<std::size_t>(i)];
      alpha[static_cast<std::size_t>(i)] = p.rho * p.s.dot(d);
      d -= alpha[static_cast<std::size_t>(i)] * p.y;
    }
    if (!mem.empty()) d *= mem.back().s.dot(mem.back().y) / mem.back().y.squaredNorm();
    for (std::size_t i = 0; i < mem.size(); ++i) {
      const auto& p = mem[i];
      const double beta = p.rho * p.y.dot(d);
      d += (alpha[i] - beta) * p.s;
    }
    double slope = g.dot(d);
    if (slope >= 0.0) {
      mem.clear();
      d = -g;
      slope = -g.squaredNorm();
    }
    double step = mem.empty() ? std::min(1.0, 1.0 / std::max(1e-12, g.lpNorm<Eigen::Infinity>())) : 1.0;
    double f_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      x_new = x + step * d;
      f_new = fg(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + 1e-4 * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    res.iterations = it + 1;
    if (!accepted) break;
    Pair p{x_new - x, g_new - g, 0.0};
    const double sy = p.s.dot(p.y);
    const double f_old = f;
    x.swap(x_new);
    g.swap(g_new);
    f = f_new;
    if (sy > 1e-12 * p.y.squaredNorm()) {
      p.rho = 1.0 / sy;
      mem.push_back(std::move(p));
      if (static_cast<int>(mem.size()) > history) mem.pop_front();
    }
    if (std::abs(f_old - f) <= 1e-14 * std::max(1.0, std::abs(f))) {
      res.converged = g.lpNorm<Eigen::Infinity>() <= std::sqrt(tol) * std::max(1.0, std::abs(f));
      break;
    }
  }
  res.objective = f;
  return res;
}

}  // namespace latentid::detail
