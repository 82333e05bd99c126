#pragma once

#include "densteer/common.hpp"

namespace densteer {

// Smooth map x -> R^n with an optional analytic Jacobian.  `fd_depth` counts
// the numerical-differentiation levels already baked into the evaluator; it
// drives the step-size ladder for any further differentiation (deeper
// nesting needs a wider step to stay above the accumulated noise).
struct VectorField {
  int n = 0;
  std::function<Vector(const Vector&)> value;
  std::function<Matrix(const Vector&)> jacobian;  // may be empty
  int fd_depth = 0;
};

// Smooth map x -> R with an optional analytic gradient.
struct ScalarField {
  int n = 0;
  std::function<double(const Vector&)> value;
  std::function<Vector(const Vector&)> gradient;  // may be empty
  int fd_depth = 0;
};

// Single-input control-affine dynamics xdot = f(x) + g(x) u restricted to
// the open set where `domain` holds.
struct ControlAffineSystem {
  int n = 0;
  VectorField f;
  VectorField g;
  std::function<bool(const Vector&)> domain;
};

// Central-difference step for differentiating a function whose evaluator
// already contains `depth` numerical levels; multiplied per coordinate by
// max(1, |x_i|).
double fd_step(int depth);

// Gradient / Jacobian, preferring the analytic member when present.
Vector gradient_of(const ScalarField& phi, const Vector& x);
Matrix jacobian_of(const VectorField& xi, const Vector& x);

// L_xi^k phi as an evaluatable field (k = 0 returns phi itself).
ScalarField lie_field(const ScalarField& phi, const VectorField& xi, int k);

// L_xi^k phi at x.  k may not exceed n + 1: beyond that the nested
// differentiation has no accuracy left to offer.
double lie_derivative(const ScalarField& phi, const VectorField& xi,
                      const Vector& x, int k);

// [xi, eta](x) = (grad eta) xi - (grad xi) eta at x.
Vector lie_bracket(const VectorField& xi, const VectorField& eta,
                   const Vector& x);

// ad_xi^k eta as an evaluatable field, and its value at a point.
VectorField ad_field(const VectorField& xi, const VectorField& eta, int k);
Vector ad_power(const VectorField& xi, const VectorField& eta, int k,
                const Vector& x);

// Outcome of the two linearizability conditions: the span condition at the
// expansion point and the involutivity of the distribution spanned by
// g, ad_f g, ..., ad_f^{n-2} g over the sample set.
struct LinearizabilityReport {
  int rank = 0;
  double involutivity_residual = 0.0;
  bool pass = false;
};

LinearizabilityReport check_linearizable(const ControlAffineSystem& sys,
                                         const Vector& x_bar,
                                         const std::vector<Vector>& samples,
                                         double tol = 1e-6);

// Linearizing data built from an admissible output lambda: z = tau(x) turns
// the dynamics into a chain of integrators driven by v = (u - alpha) / beta,
// i.e. u = alpha(x) + beta(x) v.
struct FeedbackLinearizingTuple {
  int n = 0;
  ScalarField lambda;
  std::function<Vector(const Vector&)> tau;
  std::function<double(const Vector&)> alpha;
  std::function<double(const Vector&)> beta;
  std::function<Matrix(const Vector&)> jacobian_tau;
};

// Verifies the relative-degree conditions |L_g L_f^k lambda| <= tol
// (k = 0..n-2), |L_g L_f^{n-1} lambda| > tol at every sample before
// assembling the tuple; a failure names the condition and the point.
FeedbackLinearizingTuple build_tuple(const ControlAffineSystem& sys,
                                     const ScalarField& lambda,
                                     const std::vector<Vector>& samples,
                                     double tol = 1e-6);

// Newton inversion of tau with backtracking; guarantees
// ||tau(x) - z||_inf <= tol on return.
Vector tau_inverse(const FeedbackLinearizingTuple& tuple, const Vector& z,
                   const Vector& guess, double tol = 1e-12, int max_iter = 50);

// u = alpha(x) + beta(x) * v(tau(x), t) for a new-input policy v on z-space.
double recover_control(const FeedbackLinearizingTuple& tuple,
                       const std::function<double(const Vector&, double)>& v,
                       const Vector& x, double t);

}  // namespace densteer
