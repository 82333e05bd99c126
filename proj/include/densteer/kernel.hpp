#pragma once

#include "densteer/grid.hpp"

namespace densteer {

// Heat kernel of dz = sqrt(2*eps) dw over [s, t]:
// (4*pi*eps*(t-s))^{-n/2} exp(-||zbar - z||^2 / (4*eps*(t-s))).
double brownian_kernel(double s, const Vector& zbar, double t,
                       const Vector& z, double eps, int n);
double log_brownian_kernel(double s, const Vector& zbar, double t,
                           const Vector& z, double eps, int n);

// Transition density of the chain-of-integrators prior
// dz = A z dt + b sqrt(2*eps) dw: Gaussian with mean Phi(t,s) zbar and
// covariance 2*eps*M(t,s).  Reduces to the Brownian kernel at n = 1.
double prior_kernel(double s, const Vector& zbar, double t, const Vector& z,
                    double eps, int n);
double log_prior_kernel(double s, const Vector& zbar, double t,
                        const Vector& z, double eps, int n);

// Dense integral operator (K f)(z_i) = sum_j w_ij f(z_j) with the source-cell
// quadrature folded into the weights: w_ij is the kernel's exact mass over
// source cell j for target node z_i (integrated in the earlier-time argument).
// Cell masses rather than point values x volume matter once the kernel is
// narrower than the grid spacing: node sampling aliases, cell integration
// does not.  Entries are kept in log form so small-eps kernels never
// underflow.  When the kernel factorizes across axes (the Brownian case on
// uniform grids), per-axis blocks are kept alongside and drive a much faster
// apply path; the dense matrix stays the authority and the fast path is
// checked against it in the tests.
struct KernelOperator {
  Grid source;
  Grid target;
  Matrix log_weights;
  // Row-major mirror of log_weights: the forward apply streams whole rows,
  // and the column-major original would make those reads strided.
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>
      log_weights_rm;
  std::vector<Matrix> axis_log;  // empty unless separable
  double epsilon = 0.0;
  double s = 0.0;
  double t = 0.0;

  // (K f) and (K^T f) acting on log-valued node functions; -inf entries are
  // treated as exact zeros.
  Vector apply_log(const Vector& log_f) const;
  Vector applyT_log(const Vector& log_f) const;
  // Linear-domain convenience (exponentiates; small-eps kernels underflow).
  Vector apply(const Vector& f) const;
};

KernelOperator brownian_operator(const Grid& source, const Grid& target,
                                 double s, double t, double eps);
KernelOperator prior_operator(const Grid& source, const Grid& target,
                              double s, double t, double eps);

// Full-span balance variant of prior_operator: weights are kernel masses over
// the source cell *averaged over the target cell* rather than evaluated at
// the target node, i.e. honest cell-pair transition masses.  A fixed point
// balanced against this operator makes h0_i w_ij h1_j a nonnegative pair
// mass whose marginals match the discretized endpoint densities exactly.
KernelOperator prior_coupling_operator(const Grid& source, const Grid& target,
                                       double s, double t, double eps);

// Companion operator integrating the kernel over its *later*-time argument:
// (B f)(z_i) = sum_j f(z_j) * integral of kappa(s, z_i, t, .) over cell j,
// i.e. apply_log propagates a time-t node function backward to time s.
// `source` carries the time-t nodes being integrated, `target` the time-s
// evaluation nodes.  Rows are transition probabilities, so apply on the
// constant-1 function returns the in-grid mass of each transition law.
KernelOperator prior_backward_operator(const Grid& source, const Grid& target,
                                       double s, double t, double eps);

// Convolution against N(0, cov) on one grid, with the source-cell quadrature
// folded in like every other operator here.  cov must be symmetric positive
// definite.  Used to spread pair-mass atoms into interior-time densities.
KernelOperator gaussian_smoother(const Grid& grid, const Matrix& cov);

}  // namespace densteer
