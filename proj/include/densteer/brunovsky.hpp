#pragma once

#include "densteer/common.hpp"

namespace densteer {

// Canonical single-input chain of n integrators: A is the upper shift,
// b the last basis vector.
struct BrunovskyPair {
  Matrix A;
  Vector b;
};

// Dimensions above 8 are rejected (config error): the unit-interval Gramian
// is Hilbert-like, and its condition number passes ~1e10 beyond n = 5, so
// quantities built from its inverse lose digits rapidly; above n = 8 they
// are unusable even with extended-precision internals.  n < 1 is a domain
// error.
BrunovskyPair brunovsky_pair(int n);

// exp(A * dt) for the chain's shift matrix; dt may have either sign.
Matrix nilpotent_exp(int n, double dt);

// State-transition matrix of the chain on [s, t]; requires 0 <= s <= t <= 1.
Matrix state_transition(int n, double t, double s);

// Controllability Gramian of the chain on [s, t], closed form.  t == s gives
// the zero matrix (empty integration interval); t < s is a domain error.
Matrix gramian_closed_form(int n, double t, double s);

// Same Gramian by composite Simpson quadrature with `intervals` (even)
// subintervals.  Kept as an independent cross-check of the closed form.
Matrix gramian_quadrature(int n, double t, double s, int intervals);

// Symmetric positive-definite square root via eigendecomposition.
Matrix spd_sqrt(const Matrix& S);

// Coefficient pair of the minimum-energy interpolation between fixed
// endpoints: z(t) = P(t) z(0') + Q(t) z(1') where z(0'), z(1') are the
// chain states at times 0 and 1.  Satisfies P(t) + Q(t) Phi(1,0) = Phi(t,0).
// The solves against the unit-interval Gramian run in extended precision;
// even so, expect the identity above to hold only to ~1e-8 at n = 8 (see
// the conditioning note on brunovsky_pair).
struct InterpolationMatrices {
  Matrix P;
  Matrix Q;
};
InterpolationMatrices interp_matrices(int n, double t);

}  // namespace densteer
