#pragma once

#include "densteer/kernel.hpp"

namespace densteer {

// Log of a density's node values with the support floor applied: nodes below
// support_floor * max are treated as exact zeros (-inf) and stay excluded
// from every division downstream.
Vector log_marginal(const GridDensity& d, double support_floor = 1e-12);

// Converged pair of bridge factors on one grid.  log_h0 is the backward
// (time-0) factor, log_h1 the forward (time-1) factor, both in log form;
// the reported residuals are the sup-norm defects of the two marginal
// balance equations h0 .* (K h1) = s0 and h1 .* (K^T h0) = s1.
struct BridgeFactors {
  Grid grid;
  Vector log_h0;
  Vector log_h1;
  int iterations = 0;
  std::vector<double> history;  // per-iteration sup relative change
  double residual_h0 = 0.0;
  double residual_h1 = 0.0;
};

// Alternating balance iteration: starting from h1acc = init (ones when
// empty), repeat h1 <- s1 ./ h1acc, h0 <- s0 ./ (K^T h1), h1acc <- K h0
// until the sup-norm relative change of both h0 and h1 drops to delta.
// K^T h1 is the backward image of h1 at time 0 and K h0 the forward image
// of h0 at time 1 (source and target share one grid, so the transposed
// action is the backward transport).
// The factor scale gauge is pinned to sup h0 = 1 on return; the product
// fields are gauge-invariant.  Throws ConvergenceError (with the residual
// history) when max_iter is exhausted.
BridgeFactors fixed_point(const KernelOperator& K01, const GridDensity& s0,
                          const GridDensity& s1, double delta, int max_iter,
                          const Vector& init_log_h1 = Vector());

// Factors carried back from the whitened grid to the steering grid.
struct ZFactors {
  Grid grid;
  Vector log_h0;
  Vector log_h1;
  Eigen::Index clamped = 0;  // off-hull interpolations clamped to the edge
};

// Undoes the whitening change of variables on the factors: h0(z) and h1(z)
// are read off the whitened-grid factors at the linearly mapped points,
// with the determinant weight folded into h1.  Points outside the whitened
// hull are clamped to it and counted.
ZFactors recover_factors(const BridgeFactors& hat, const Grid& zgrid, int n);

// One time slice of the regularized steering solution.  At the endpoints
// sigma is the factor times the balance image (so it reproduces the
// converged marginal); at interior times it is assembled from the balanced
// pair masses directly (see transient below), and log_hhat/log_h are
// point-quadrature factor propagations kept as diagnostics: their product
// matches sigma only where the kernel tail quadrature is benign.
struct TransientSlice {
  double t = 0.0;
  GridDensity sigma;  // raw mass recorded, never renormalized here
  Vector v;           // control at nodes
  Vector log_hhat;
  Vector log_h;
};

// Interior-time reconstruction.  Every balanced cell pair (i, j) carries
// mass h0_i w_ij h1_j along the prior's pinned bridge, whose time-t law is
// Gaussian with mean P(t) z_i + Q(t) z_j (the minimum-energy interpolant)
// and a pair-independent covariance; sigma(., t) is that mixture, deposited
// multilinearly and spread by one Gaussian smoothing.  The slice mass then
// telescopes to the endpoint mass instead of paying the tail-quadrature
// mismatch of composed kernel applications, which can reach many nats at
// cell-scale kernel widths.  The control comes from the same conditioning:
// v = b' Phi(1,t)' M(1,t)^{-1} (E[z(1) | z, t] - Phi(1,t) z), which equals
// 2*eps times the input-channel derivative of log h; `gradient_of_log`
// false switches to the derivative of h itself (kept for comparison), read
// off the diagnostic field by central differences.
// `coupling`, when given, must be the prior_coupling_operator of the same
// grid and epsilon; passing it skips an expensive rebuild per slice.
TransientSlice transient(const ZFactors& zf, double t, double eps,
                         bool gradient_of_log = true,
                         const KernelOperator* coupling = nullptr);

// Quadrature of 0.5 |v|^2 sigma over the grid and trapezoid over the
// slices' times (slices must be time-sorted).
double control_cost(const std::vector<TransientSlice>& slices);

// Full problem description for the steering pipeline.
struct Scenario {
  ControlAffineSystem sys;
  ScalarField lambda;
  std::vector<Vector> tuple_samples;  // where the relative degree is checked
  GaussianMixture rho0;
  GaussianMixture rho1;
  Grid xgrid;
  Grid zgrid;
  double epsilon = 1e-2;
  double delta = 1e-9;
  int max_iter = 5000;
  std::vector<double> snapshots;
  double masstol = 1e-3;
  bool gradient_of_log = true;
};

struct BridgeSolution {
  std::vector<double> times;
  std::vector<GridDensity> sigma;  // steering-coordinate snapshots, raw mass
  std::vector<Vector> control;     // node-sampled control per snapshot
  std::vector<GridDensity> rho;    // state-space snapshots
  double epsilon = 0.0;
  int iterations_hat = 0;
  int iterations_polish = 0;
  std::vector<double> history;  // hat-stage then polish-stage changes
  double residual_h0 = 0.0;     // balance defects on the steering grid
  double residual_h1 = 0.0;
  double hat_residual_h0 = 0.0;
  double hat_residual_h1 = 0.0;
  double endpoint_l1_z0 = 0.0;
  double endpoint_l1_z1 = 0.0;
  double endpoint_l1_x0 = 0.0;
  double endpoint_l1_x1 = 0.0;
  Eigen::Index recover_clamped = 0;
  GridDensity rho0;    // discretized endpoint targets
  GridDensity rho1;
  GridDensity sigma0;  // their steering-coordinate images
  GridDensity sigma1;
};

// End-to-end solve: discretize the endpoint mixtures, push them through the
// linearizing map, whiten, run the Brownian-kernel balance iteration, carry
// the factors back, polish them against the linear-prior kernel on the
// steering grid, then reconstruct density and control snapshots in both
// coordinate systems.  Stage failures are rethrown with the stage name
// prefixed.  The hat and polish iterations share the max_iter budget.
BridgeSolution steer_pipeline(const Scenario& sc);

}  // namespace densteer
