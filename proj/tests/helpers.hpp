#pragma once

// Independent reference implementations used only by tests.  They stay
// deliberately naive (truncated series, brute-force quadrature) so that a
// bug in the library cannot hide in a shared code path.

#include <cmath>
#include <random>

#include "densteer/common.hpp"

namespace testutil {

using densteer::Matrix;
using densteer::Vector;

inline std::mt19937_64 rng(unsigned seed = 20240817u) {
  return std::mt19937_64{seed};
}

// Truncated power series for exp(A * dt).  Enough terms that the tail is
// below double rounding for the matrices exercised in tests.
inline Matrix exp_series(const Matrix& A, double dt, int terms = 30) {
  Matrix acc = Matrix::Identity(A.rows(), A.cols());
  Matrix term = acc;
  for (int k = 1; k <= terms; ++k) {
    term = term * A * (dt / k);
    acc += term;
  }
  return acc;
}

// Composite Simpson rule on [a, b] with an even number of subintervals.
template <typename F>
double simpson(const F& f, double a, double b, int intervals) {
  const double h = (b - a) / intervals;
  double acc = f(a) + f(b);
  for (int k = 1; k < intervals; ++k)
    acc += (k % 2 == 1 ? 4.0 : 2.0) * f(a + k * h);
  return acc * h / 3.0;
}

// Monotone rearrangement between two 1-D densities sampled on uniform
// grids: returns T(x) with T pushing density `p` (on xs) to `q` (on ys),
// computed by matching cumulative masses with linear interpolation.
inline std::vector<double> quantile_map_1d(const std::vector<double>& xs,
                                           const std::vector<double>& p,
                                           const std::vector<double>& ys,
                                           const std::vector<double>& q) {
  const double hx = xs[1] - xs[0];
  const double hy = ys[1] - ys[0];
  std::vector<double> cp(xs.size()), cq(ys.size());
  double a = 0.0;
  for (size_t i = 0; i < xs.size(); ++i) {
    a += p[i] * hx;
    cp[i] = a;
  }
  double tot_p = a;
  a = 0.0;
  for (size_t j = 0; j < ys.size(); ++j) {
    a += q[j] * hy;
    cq[j] = a;
  }
  double tot_q = a;
  std::vector<double> T(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) {
    const double target = cp[i] / tot_p * tot_q;
    size_t j = 0;
    while (j + 1 < cq.size() && cq[j] < target) ++j;
    if (j == 0) {
      T[i] = ys[0];
    } else {
      const double w = (target - cq[j - 1]) / (cq[j] - cq[j - 1]);
      T[i] = ys[j - 1] + w * (ys[j] - ys[j - 1]);
    }
  }
  return T;
}

}  // namespace testutil
