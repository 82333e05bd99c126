#pragma once

#include <iosfwd>

#include "densteer/lie.hpp"

namespace densteer {

// Rectangular tensor grid with uniform spacing per axis.  Nodes are
// flattened row-major: axis 0 varies slowest, the last axis fastest.
struct Grid {
  std::vector<Vector> axes;

  int dim() const { return static_cast<int>(axes.size()); }
  Eigen::Index count(int a) const { return axes[a].size(); }
  Eigen::Index size() const;
  double spacing(int a) const { return axes[a][1] - axes[a][0]; }
  double cell_volume() const;
  Vector lower() const;
  Vector upper() const;
  Vector node(Eigen::Index flat) const;
};

// Uniform grid over [lo, hi] with the given node count per axis.
Grid uniform_grid(const Vector& lo, const Vector& hi,
                  const std::vector<int>& counts);

// Enforces the shape contract: >= 2 nodes per axis, strictly increasing,
// per-axis spacing uniform to 1e-12 (relative).
void validate_grid(const Grid& g);

bool grids_match(const Grid& a, const Grid& b, double tol = 1e-12);

// Node-sampled density with Riemann (cell-volume) quadrature.  `raw_mass`
// keeps the pre-renormalization mass so truncation stays visible after the
// values are rescaled.
struct GridDensity {
  Grid grid;
  Vector values;
  double raw_mass = 1.0;
};

struct GaussianMixture {
  std::vector<double> weights;
  std::vector<Vector> means;
  std::vector<Matrix> covariances;
};

// Validates weights (positive, unit sum to 1e-12) and SPD covariances.
GaussianMixture make_mixture(const std::vector<double>& weights,
                             const std::vector<Vector>& means,
                             const std::vector<Matrix>& covariances);

double mixture_pdf(const GaussianMixture& mix, const Vector& x);

// Bounding box of the component means padded by k_sigma per-axis standard
// deviations; used to frame scenario grids.
std::pair<Vector, Vector> mixture_bounding_box(const GaussianMixture& mix,
                                               double k_sigma);

// Node-wise mixture evaluation.  Pre-normalization mass below 0.9 means the
// grid misses the support and raises DomainError; with `renormalize` the
// values are scaled to unit mass and the raw mass is recorded.
GridDensity discretize(const GaussianMixture& mix, const Grid& grid,
                       bool renormalize = true);

// Multilinear interpolation of a node-sampled field; `outside` is returned
// beyond the hull (0 for densities, -inf for log fields).
double interp_multilinear(const Grid& grid, const Vector& values,
                          const Vector& x, double outside = 0.0);
double interp_density(const GridDensity& f, const Vector& x);

// Density of z = tau(x) when x ~ rho: sigma(z) = rho(tau^{-1}(z)) / |det J|.
// tau is inverted by warm-started Newton node by node; failures are fatal
// unless the density there is negligible.
GridDensity pushforward_diffeo(const GridDensity& rho,
                               const FeedbackLinearizingTuple& tuple,
                               const Grid& zgrid, bool renormalize = true);

// Inverse direction, forward evaluations only:
// rho(x) = sigma(tau(x)) |det J(x)|.
GridDensity pullback_to_x(const GridDensity& sigma,
                          const FeedbackLinearizingTuple& tuple,
                          const Grid& xgrid, bool renormalize = true);

// Density of y = T z when z ~ f, for invertible linear T.
GridDensity linear_pushforward(const GridDensity& f, const Matrix& T,
                               const Grid& out_grid, bool renormalize = true);

// Whitening pair (T0, T1): the inverse square root of the unit-interval
// controllability Gramian, composed with the unit-time transition for the
// left marginal.  These turn the linear-prior bridge into a Brownian one.
std::pair<Matrix, Matrix> whitening_maps(int n);

// Applies the whitening change of variables that turns the two-point
// steering marginals into the pair fed to the Brownian-kernel iteration;
// both outputs share one grid sized to cover both transformed supports.
std::pair<GridDensity, GridDensity> hat_marginals(const GridDensity& sigma0,
                                                  const GridDensity& sigma1,
                                                  int n);

// Riemann integrals on a shared grid.
double total_mass(const GridDensity& a);
double l1_distance(const GridDensity& a, const GridDensity& b);

// CSV snapshot: header "axis0,...,axis{n-1},value", one row per node,
// row-major, 17 significant digits (byte-stable for identical inputs).
void write_density_csv(const GridDensity& f, std::ostream& os);
GridDensity read_density_csv(std::istream& is);

}  // namespace densteer
