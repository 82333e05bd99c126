#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace densteer {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Bad scenario input: unknown fields, invalid values, inconsistent shapes.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mathematical precondition violated at runtime (singular decoupling term,
// point outside a diffeomorphism's domain, non-SPD matrix, ...).
class DomainError : public std::runtime_error {
public:
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// An iteration hit its budget before meeting tolerance.  `history` carries
// the per-iteration residuals so the caller can inspect the stall.
class ConvergenceError : public std::runtime_error {
public:
  ConvergenceError(const std::string& msg, std::vector<double> hist)
      : std::runtime_error(msg), history(std::move(hist)) {}
  std::vector<double> history;
};

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log(sum(exp(v))) without overflow; empty or all -inf input yields -inf.
inline double logsumexp(const Vector& v) {
  if (v.size() == 0) return kNegInf;
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf (or a stray +inf/NaN propagates)
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

inline double factorial(int k) {
  double r = 1.0;
  for (int i = 2; i <= k; ++i) r *= i;
  return r;
}

// One classical RK4 step for y' = rhs(t, y).
template <typename State, typename Rhs>
State rk4_step(const Rhs& rhs, double t, const State& y, double h) {
  const State k1 = rhs(t, y);
  const State k2 = rhs(t + 0.5 * h, y + (0.5 * h) * k1);
  const State k3 = rhs(t + 0.5 * h, y + (0.5 * h) * k2);
  const State k4 = rhs(t + h, y + h * k3);
  return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

struct NewtonResult {
  Vector x;
  int iterations = 0;
  bool converged = false;
  std::vector<double> residual_trace;
};

// Damped Newton on F(x) = 0 with backtracking line search (step halving,
// at most 30 halvings per iteration).  `jac` returns the Jacobian of F.
inline NewtonResult newton_solve(
    const std::function<Vector(const Vector&)>& F,
    const std::function<Matrix(const Vector&)>& jac, const Vector& x0,
    double tol = 1e-12, int max_iter = 50) {
  NewtonResult res;
  res.x = x0;
  Vector fx = F(res.x);
  double norm = fx.norm();
  res.residual_trace.push_back(norm);
  for (int it = 0; it < max_iter; ++it) {
    if (norm <= tol) {
      res.converged = true;
      return res;
    }
    const auto lu = jac(res.x).fullPivLu();
    if (!lu.isInvertible()) break;
    const Vector step = lu.solve(-fx);
    if (!step.allFinite()) break;
    double alpha = 1.0;
    Vector x_new;
    Vector f_new;
    double norm_new = norm;
    bool accepted = false;
    for (int half = 0; half < 30; ++half) {
      x_new = res.x + alpha * step;
      f_new = F(x_new);
      norm_new = f_new.allFinite() ? f_new.norm()
                                   : std::numeric_limits<double>::infinity();
      if (norm_new < norm) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;
    res.x = x_new;
    fx = f_new;
    norm = norm_new;
    ++res.iterations;
    res.residual_trace.push_back(norm);
  }
  res.converged = norm <= tol;
  return res;
}

}  // namespace densteer
