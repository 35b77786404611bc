#pragma once

// BFGS quasi-Newton minimization with a strong-Wolfe line search
// (bracketing + zoom, cubic interpolation). Keeps the best finite point ever
// evaluated and returns it.

#include "mdnadapt/common.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace mdnadapt::bfgs {

struct ValueAndGradient {
  double value = 0.0;
  Vector gradient;
};

using Objective = std::function<ValueAndGradient(const Vector&)>;

struct Options {
  int max_iterations = 200;
  double grad_tol = 1e-6;
  double c1 = 1e-4;
  double c2 = 0.9;
  int max_line_search = 40;
};

struct Result {
  Vector x;
  double value = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  /// Set when a non-finite objective could not be stepped around.
  bool non_finite = false;
  std::vector<double> trace;  // objective value after each iteration
};

namespace detail {

struct Point {
  double alpha = 0.0;
  double f = 0.0;
  double slope = 0.0;
  Vector x;
  Vector g;
};

inline bool finite(const ValueAndGradient& vg) { return std::isfinite(vg.value) && vg.gradient.allFinite(); }

/// Minimizer of the cubic through (a, fa, da), (b, fb, db); falls back to bisection.
inline double cubic_step(double a, double fa, double da, double b, double fb, double db) {
  const double d1 = da + db - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - da * db;
  const double lo = std::min(a, b);
  const double hi = std::max(a, b);
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    const double t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    const double margin = 0.1 * (hi - lo);
    if (std::isfinite(t) && t > lo + margin && t < hi - margin) return t;
  }
  return 0.5 * (a + b);
}

}  // namespace detail

inline Result minimize(const Objective& objective, const Vector& x0, const Options& opt = {}) {
  Result res;
  Vector x = x0;
  ValueAndGradient cur = objective(x);
  ++res.evaluations;
  require(detail::finite(cur), "bfgs: objective is not finite at the starting point");
  require(cur.gradient.size() == x.size(), "bfgs: gradient length mismatch");

  Vector best_x = x;
  double best_f = cur.value;
  Vector best_g = cur.gradient;
  auto consider = [&](const Vector& px, const ValueAndGradient& vg) {
    if (detail::finite(vg) && vg.value < best_f) {
      best_f = vg.value;
      best_x = px;
      best_g = vg.gradient;
    }
  };

  const auto n = x.size();
  Matrix h = Matrix::Identity(n, n);
  bool scaled = false;

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    if (cur.gradient.norm() <= opt.grad_tol) {
      res.converged = true;
      break;
    }
    Vector dir = -h * cur.gradient;
    double slope0 = cur.gradient.dot(dir);
    if (!(slope0 < 0.0)) {
      h.setIdentity();
      dir = -cur.gradient;
      slope0 = cur.gradient.dot(dir);
    }
    const double f0 = cur.value;
    double alpha = iter == 0 && !scaled ? std::min(1.0, 1.0 / std::max(1e-300, cur.gradient.norm())) : 1.0;

    detail::Point lo{0.0, f0, slope0, x, cur.gradient};
    detail::Point hi;
    bool have_hi = false;
    detail::Point accepted;
    bool found = false;
    int evals = 0;
    bool hit_non_finite = false;

    auto eval = [&](double a) -> std::optional<detail::Point> {
      detail::Point p;
      p.alpha = a;
      p.x = x + a * dir;
      const ValueAndGradient vg = objective(p.x);
      ++res.evaluations;
      ++evals;
      if (!detail::finite(vg)) return std::nullopt;
      consider(p.x, vg);
      p.f = vg.value;
      p.g = vg.gradient;
      p.slope = vg.gradient.dot(dir);
      return p;
    };

    // Bracketing phase.
    double prev_alpha = 0.0;
    while (evals < opt.max_line_search) {
      auto p = eval(alpha);
      if (!p) {
        hit_non_finite = true;
        alpha = 0.5 * (prev_alpha + alpha);
        if (alpha - prev_alpha < 1e-16) break;
        have_hi = false;
        continue;
      }
      if (p->f > f0 + opt.c1 * p->alpha * slope0 || (prev_alpha > 0.0 && p->f >= lo.f)) {
        hi = *p;
        have_hi = true;
        break;
      }
      if (std::abs(p->slope) <= -opt.c2 * slope0) {
        accepted = *p;
        found = true;
        break;
      }
      if (p->slope >= 0.0) {
        hi = lo;
        lo = *p;
        have_hi = true;
        break;
      }
      lo = *p;
      prev_alpha = alpha;
      alpha *= 2.0;
    }
    // Zoom phase.
    while (!found && have_hi && evals < opt.max_line_search) {
      const double a = detail::cubic_step(lo.alpha, lo.f, lo.slope, hi.alpha, hi.f, hi.slope);
      if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, std::abs(lo.alpha))) break;
      auto p = eval(a);
      if (!p) {
        hit_non_finite = true;
        hi.alpha = a;
        hi.f = std::numeric_limits<double>::infinity();
        continue;
      }
      if (p->f > f0 + opt.c1 * p->alpha * slope0 || p->f >= lo.f) {
        hi = *p;
      } else {
        if (std::abs(p->slope) <= -opt.c2 * slope0) {
          accepted = *p;
          found = true;
          break;
        }
        if (p->slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
        lo = *p;
      }
    }
    // Accept a sufficient-decrease point even if curvature was not met.
    if (!found && lo.alpha > 0.0) {
      accepted = lo;
      found = true;
    }
    if (!found) {
      res.non_finite = res.non_finite || hit_non_finite;
      break;
    }

    const Vector s = accepted.x - x;
    const Vector y = accepted.g - cur.gradient;
    x = accepted.x;
    cur.value = accepted.f;
    cur.gradient = accepted.g;
    res.iterations = iter + 1;
    res.trace.push_back(cur.value);

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
      if (!scaled) {
        h = Matrix::Identity(n, n) * (sy / y.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Vector hy = h * y;
      const double yhy = y.dot(hy);
      h += ((1.0 + rho * yhy) * rho) * (s * s.transpose()) - rho * (hy * s.transpose() + s * hy.transpose());
    }
  }
  if (!res.converged && cur.gradient.norm() <= opt.grad_tol) res.converged = true;

  res.x = best_x;
  res.value = best_f;
  res.grad_norm = best_g.norm();
  return res;
}

}  // namespace mdnadapt::bfgs
