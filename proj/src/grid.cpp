#include "densteer/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "densteer/brunovsky.hpp"

namespace densteer {

namespace {

std::string fmt_vec(const Vector& x) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << ")";
  return os.str();
}

std::vector<Eigen::Index> strides_of(const Grid& g) {
  const int n = g.dim();
  std::vector<Eigen::Index> s(n, 1);
  for (int a = n - 2; a >= 0; --a) s[a] = s[a + 1] * g.count(a + 1);
  return s;
}

}  // namespace

Eigen::Index Grid::size() const {
  Eigen::Index s = 1;
  for (const auto& ax : axes) s *= ax.size();
  return s;
}

double Grid::cell_volume() const {
  double v = 1.0;
  for (int a = 0; a < dim(); ++a) v *= spacing(a);
  return v;
}

Vector Grid::lower() const {
  Vector lo(dim());
  for (int a = 0; a < dim(); ++a) lo[a] = axes[a][0];
  return lo;
}

Vector Grid::upper() const {
  Vector hi(dim());
  for (int a = 0; a < dim(); ++a) hi[a] = axes[a][axes[a].size() - 1];
  return hi;
}

Vector Grid::node(Eigen::Index flat) const {
  const int n = dim();
  Vector x(n);
  for (int a = n - 1; a >= 0; --a) {
    const Eigen::Index c = count(a);
    x[a] = axes[a][flat % c];
    flat /= c;
  }
  return x;
}

Grid uniform_grid(const Vector& lo, const Vector& hi,
                  const std::vector<int>& counts) {
  if (lo.size() != hi.size() ||
      counts.size() != static_cast<size_t>(lo.size()))
    throw ConfigError("uniform_grid: inconsistent bounds/count sizes");
  Grid g;
  for (Eigen::Index a = 0; a < lo.size(); ++a) {
    if (counts[a] < 2)
      throw ConfigError("uniform_grid: axis " + std::to_string(a) +
                        " needs at least 2 nodes");
    if (!(lo[a] < hi[a]))
      throw ConfigError("uniform_grid: axis " + std::to_string(a) +
                        " has empty extent");
    g.axes.push_back(
        Vector::LinSpaced(counts[a], lo[a], hi[a]));
  }
  validate_grid(g);
  return g;
}

void validate_grid(const Grid& g) {
  if (g.axes.empty()) throw ConfigError("grid has no axes");
  for (int a = 0; a < g.dim(); ++a) {
    const Vector& ax = g.axes[a];
    if (ax.size() < 2)
      throw ConfigError("grid axis " + std::to_string(a) +
                        " has fewer than 2 nodes");
    const double h = ax[1] - ax[0];
    if (!(h > 0.0))
      throw ConfigError("grid axis " + std::to_string(a) +
                        " is not strictly increasing");
    for (Eigen::Index i = 1; i < ax.size(); ++i) {
      const double step = ax[i] - ax[i - 1];
      if (!(step > 0.0) || std::abs(step - h) > 1e-12 * std::max(1.0, h))
        throw ConfigError("grid axis " + std::to_string(a) +
                          " is not uniformly spaced");
    }
  }
}

bool grids_match(const Grid& a, const Grid& b, double tol) {
  if (a.dim() != b.dim()) return false;
  for (int i = 0; i < a.dim(); ++i) {
    if (a.count(i) != b.count(i)) return false;
    if ((a.axes[i] - b.axes[i]).cwiseAbs().maxCoeff() > tol) return false;
  }
  return true;
}

GaussianMixture make_mixture(const std::vector<double>& weights,
                             const std::vector<Vector>& means,
                             const std::vector<Matrix>& covariances) {
  if (weights.empty() || weights.size() != means.size() ||
      weights.size() != covariances.size())
    throw ConfigError("mixture: component lists have inconsistent sizes");
  const Eigen::Index n = means[0].size();
  double sum = 0.0;
  for (size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] > 0.0))
      throw ConfigError("mixture: weight " + std::to_string(i) +
                        " is not positive");
    sum += weights[i];
    if (means[i].size() != n || covariances[i].rows() != n ||
        covariances[i].cols() != n)
      throw ConfigError("mixture: component " + std::to_string(i) +
                        " has inconsistent dimensions");
    const Matrix& C = covariances[i];
    if ((C - C.transpose()).cwiseAbs().maxCoeff() >
        1e-12 * std::max(1.0, C.cwiseAbs().maxCoeff()))
      throw ConfigError("mixture: covariance " + std::to_string(i) +
                        " is not symmetric");
    if (Eigen::LLT<Matrix>(C).info() != Eigen::Success)
      throw ConfigError("mixture: covariance " + std::to_string(i) +
                        " is not positive definite");
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw ConfigError("mixture: weights sum to " + std::to_string(sum) +
                      ", expected 1");
  return GaussianMixture{weights, means, covariances};
}

double mixture_pdf(const GaussianMixture& mix, const Vector& x) {
  const int n = static_cast<int>(x.size());
  double v = 0.0;
  for (size_t i = 0; i < mix.weights.size(); ++i) {
    const Eigen::LLT<Matrix> llt(mix.covariances[i]);
    const Matrix L = llt.matrixL();
    double logdet = 0.0;
    for (int d = 0; d < n; ++d) logdet += 2.0 * std::log(L(d, d));
    const Vector q = L.triangularView<Eigen::Lower>().solve(x - mix.means[i]);
    v += mix.weights[i] *
         std::exp(-0.5 * q.squaredNorm() - 0.5 * logdet -
                  0.5 * n * std::log(2.0 * M_PI));
  }
  return v;
}

std::pair<Vector, Vector> mixture_bounding_box(const GaussianMixture& mix,
                                               double k_sigma) {
  const Eigen::Index n = mix.means[0].size();
  Vector lo = Vector::Constant(n, std::numeric_limits<double>::infinity());
  Vector hi = -lo;
  for (size_t i = 0; i < mix.means.size(); ++i) {
    for (Eigen::Index a = 0; a < n; ++a) {
      const double s = std::sqrt(mix.covariances[i](a, a));
      lo[a] = std::min(lo[a], mix.means[i][a] - k_sigma * s);
      hi[a] = std::max(hi[a], mix.means[i][a] + k_sigma * s);
    }
  }
  return {lo, hi};
}

GridDensity discretize(const GaussianMixture& mix, const Grid& grid,
                       bool renormalize) {
  const int n = grid.dim();
  if (mix.means[0].size() != n)
    throw ConfigError("discretize: mixture dimension " +
                      std::to_string(mix.means[0].size()) +
                      " does not match grid dimension " + std::to_string(n));
  struct Comp {
    Matrix L;
    Vector mu;
    double lognorm;
    double w;
  };
  std::vector<Comp> comps;
  for (size_t i = 0; i < mix.weights.size(); ++i) {
    Comp c;
    c.L = Eigen::LLT<Matrix>(mix.covariances[i]).matrixL();
    c.mu = mix.means[i];
    double logdet = 0.0;
    for (int d = 0; d < n; ++d) logdet += 2.0 * std::log(c.L(d, d));
    c.lognorm = -0.5 * logdet - 0.5 * n * std::log(2.0 * M_PI);
    c.w = mix.weights[i];
    comps.push_back(std::move(c));
  }
  GridDensity out;
  out.grid = grid;
  out.values.resize(grid.size());
  for (Eigen::Index k = 0; k < grid.size(); ++k) {
    const Vector x = grid.node(k);
    double v = 0.0;
    for (const auto& c : comps) {
      const Vector q =
          c.L.triangularView<Eigen::Lower>().solve(x - c.mu);
      v += c.w * std::exp(c.lognorm - 0.5 * q.squaredNorm());
    }
    out.values[k] = v;
  }
  const double mass = out.values.sum() * grid.cell_volume();
  if (mass < 0.9)
    throw DomainError("grid does not cover support (pre-normalization mass " +
                      std::to_string(mass) + ")");
  out.raw_mass = mass;
  if (renormalize) out.values /= mass;
  return out;
}

double interp_multilinear(const Grid& grid, const Vector& values,
                          const Vector& x, double outside) {
  const int n = grid.dim();
  if (x.size() != n)
    throw ConfigError("interp_multilinear: point dimension mismatch");
  if (values.size() != grid.size())
    throw ConfigError("interp_multilinear: value count mismatch");
  std::vector<Eigen::Index> base(n);
  std::vector<double> frac(n);
  for (int a = 0; a < n; ++a) {
    const double top = static_cast<double>(grid.count(a) - 1);
    const double u = (x[a] - grid.axes[a][0]) / grid.spacing(a);
    if (!std::isfinite(u) || u < -1e-9 || u > top + 1e-9) return outside;
    const double uc = std::min(std::max(u, 0.0), top);
    base[a] = std::min<Eigen::Index>(static_cast<Eigen::Index>(uc),
                                     grid.count(a) - 2);
    frac[a] = uc - static_cast<double>(base[a]);
  }
  double acc = 0.0;
  for (unsigned m = 0; m < (1u << n); ++m) {
    double w = 1.0;
    Eigen::Index flat = 0;
    for (int a = 0; a < n; ++a) {
      const bool up = (m >> a) & 1u;
      w *= up ? frac[a] : 1.0 - frac[a];
      flat = flat * grid.count(a) + base[a] + (up ? 1 : 0);
    }
    if (w == 0.0) continue;
    const double v = values[flat];
    if (v == kNegInf) return kNegInf;  // a log-field hole dominates its cell
    acc += w * v;
  }
  return acc;
}

double interp_density(const GridDensity& f, const Vector& x) {
  return interp_multilinear(f.grid, f.values, x, 0.0);
}

GridDensity pushforward_diffeo(const GridDensity& rho,
                               const FeedbackLinearizingTuple& tuple,
                               const Grid& zgrid, bool renormalize) {
  const int n = zgrid.dim();
  if (rho.grid.dim() != n || tuple.n != n)
    throw ConfigError("pushforward_diffeo: dimension mismatch");
  const double negligible = 1e-12 * rho.values.maxCoeff();
  Eigen::Index peak_at = 0;
  rho.values.maxCoeff(&peak_at);
  const Vector seed_peak = rho.grid.node(peak_at);
  const Vector seed_center = 0.5 * (rho.grid.lower() + rho.grid.upper());
  const auto strides = strides_of(zgrid);

  GridDensity out;
  out.grid = zgrid;
  out.values.resize(zgrid.size());
  std::vector<Vector> sol(zgrid.size());
  std::vector<char> ok(zgrid.size(), 0);
  for (Eigen::Index k = 0; k < zgrid.size(); ++k) {
    // Warm start from an already-inverted neighbor; tau^{-1} is continuous,
    // so that iterate sits one cell away from the answer.
    Vector guess = seed_peak;
    if (k > 0) {
      Eigen::Index rem = k;
      for (int a = n - 1; a >= 0; --a) {
        const Eigen::Index ia = rem % zgrid.count(a);
        rem /= zgrid.count(a);
        if (ia > 0 && ok[k - strides[a]]) {
          guess = sol[k - strides[a]];
          break;
        }
      }
    }
    const Vector z = zgrid.node(k);
    auto F = [&](const Vector& y) -> Vector { return tuple.tau(y) - z; };
    NewtonResult r = newton_solve(F, tuple.jacobian_tau, guess, 1e-10, 60);
    if (!r.converged) {
      double nearby = interp_density(rho, r.x);
      for (const Vector& seed : {seed_peak, seed_center}) {
        const NewtonResult retry =
            newton_solve(F, tuple.jacobian_tau, seed, 1e-10, 80);
        if (retry.converged) {
          r = retry;
          break;
        }
        nearby = std::max(nearby, interp_density(rho, retry.x));
      }
      if (!r.converged) {
        // The node sits outside the map's range (or Newton stalled on the
        // way there); that is only tolerable where no mass lives.
        if (nearby > negligible)
          throw DomainError(
              "pushforward_diffeo: tau inversion failed at node z = " +
              fmt_vec(z) + " which carries mass");
        out.values[k] = 0.0;
        continue;
      }
    }
    ok[k] = 1;
    sol[k] = r.x;
    const double det = tuple.jacobian_tau(r.x).determinant();
    if (std::abs(det) < 1e-12)
      throw DomainError("pushforward_diffeo: singular map at x = " +
                        fmt_vec(r.x));
    out.values[k] = interp_density(rho, r.x) / std::abs(det);
  }
  const double mass = out.values.sum() * zgrid.cell_volume();
  if (!(mass > 0.0))
    throw DomainError("pushforward_diffeo: image carries no mass");
  out.raw_mass = mass;
  if (renormalize) out.values /= mass;
  return out;
}

GridDensity pullback_to_x(const GridDensity& sigma,
                          const FeedbackLinearizingTuple& tuple,
                          const Grid& xgrid, bool renormalize) {
  const int n = xgrid.dim();
  if (sigma.grid.dim() != n || tuple.n != n)
    throw ConfigError("pullback_to_x: dimension mismatch");
  GridDensity out;
  out.grid = xgrid;
  out.values.resize(xgrid.size());
  for (Eigen::Index k = 0; k < xgrid.size(); ++k) {
    const Vector x = xgrid.node(k);
    const double det = tuple.jacobian_tau(x).determinant();
    out.values[k] = interp_density(sigma, tuple.tau(x)) * std::abs(det);
  }
  const double mass = out.values.sum() * xgrid.cell_volume();
  if (!(mass > 0.0))
    throw DomainError("pullback_to_x: image carries no mass");
  out.raw_mass = mass;
  if (renormalize) out.values /= mass;
  return out;
}

GridDensity linear_pushforward(const GridDensity& f, const Matrix& T,
                               const Grid& out_grid, bool renormalize) {
  if (T.rows() != T.cols() || T.rows() != f.grid.dim() ||
      out_grid.dim() != f.grid.dim())
    throw ConfigError("linear_pushforward: dimension mismatch");
  const Eigen::FullPivLU<Matrix> lu(T);
  if (!lu.isInvertible())
    throw ConfigError("linear_pushforward: map is singular");
  const double absdet = std::abs(lu.determinant());
  GridDensity out;
  out.grid = out_grid;
  out.values.resize(out_grid.size());
  for (Eigen::Index k = 0; k < out_grid.size(); ++k) {
    const Vector x = lu.solve(out_grid.node(k));
    out.values[k] = interp_density(f, x) / absdet;
  }
  const double mass = out.values.sum() * out_grid.cell_volume();
  if (!(mass > 0.0))
    throw DomainError("linear_pushforward: image carries no mass");
  out.raw_mass = mass;
  if (renormalize) out.values /= mass;
  return out;
}

std::pair<Matrix, Matrix> whitening_maps(int n) {
  const Matrix sqrtM = spd_sqrt(gramian_closed_form(n, 1.0, 0.0));
  const Eigen::LLT<Matrix> lls(sqrtM);
  return {lls.solve(nilpotent_exp(n, 1.0)),
          lls.solve(Matrix::Identity(n, n))};
}

std::pair<GridDensity, GridDensity> hat_marginals(const GridDensity& sigma0,
                                                  const GridDensity& sigma1,
                                                  int n) {
  if (sigma0.grid.dim() != n || sigma1.grid.dim() != n)
    throw ConfigError("hat_marginals: dimension mismatch");
  const auto [T0, T1] = whitening_maps(n);

  const auto image_box = [n](const Grid& g, const Matrix& T) {
    const Vector lo = g.lower(), hi = g.upper();
    Vector blo = Vector::Constant(n, std::numeric_limits<double>::infinity());
    Vector bhi = -blo;
    for (unsigned m = 0; m < (1u << n); ++m) {
      Vector c(n);
      for (int a = 0; a < n; ++a) c[a] = ((m >> a) & 1u) ? hi[a] : lo[a];
      const Vector y = T * c;
      blo = blo.cwiseMin(y);
      bhi = bhi.cwiseMax(y);
    }
    return std::pair<Vector, Vector>{blo, bhi};
  };
  const auto [lo0, hi0] = image_box(sigma0.grid, T0);
  const auto [lo1, hi1] = image_box(sigma1.grid, T1);
  std::vector<int> counts(n);
  for (int a = 0; a < n; ++a)
    counts[a] = static_cast<int>(
        std::max(sigma0.grid.count(a), sigma1.grid.count(a)));
  const Grid hg =
      uniform_grid(lo0.cwiseMin(lo1), hi0.cwiseMax(hi1), counts);

  GridDensity h0 = linear_pushforward(sigma0, T0, hg, false);
  GridDensity h1 = linear_pushforward(sigma1, T1, hg, false);
  for (GridDensity* h : {&h0, &h1}) {
    const double m = total_mass(*h);
    if (std::abs(m - 1.0) > 5e-2)
      throw DomainError(
          "hat_marginals: transformed support escaped the grid (mass " +
          std::to_string(m) + ")");
    h->values /= m;
    h->raw_mass = m;
  }
  return {std::move(h0), std::move(h1)};
}

double total_mass(const GridDensity& a) {
  return a.values.sum() * a.grid.cell_volume();
}

double l1_distance(const GridDensity& a, const GridDensity& b) {
  if (!grids_match(a.grid, b.grid))
    throw ConfigError("l1_distance: densities live on different grids");
  return (a.values - b.values).cwiseAbs().sum() * a.grid.cell_volume();
}

void write_density_csv(const GridDensity& f, std::ostream& os) {
  const int n = f.grid.dim();
  for (int a = 0; a < n; ++a) os << "axis" << a << ",";
  os << "value\n";
  char buf[40];
  for (Eigen::Index k = 0; k < f.grid.size(); ++k) {
    const Vector x = f.grid.node(k);
    for (int a = 0; a < n; ++a) {
      std::snprintf(buf, sizeof(buf), "%.17g", x[a]);
      os << buf << ",";
    }
    std::snprintf(buf, sizeof(buf), "%.17g", f.values[k]);
    os << buf << "\n";
  }
}

GridDensity read_density_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("csv: empty stream");
  int n = 0;
  {
    std::stringstream hs(line);
    std::string tok;
    std::vector<std::string> header;
    while (std::getline(hs, tok, ',')) header.push_back(tok);
    if (header.size() < 2 || header.back() != "value")
      throw ConfigError("csv: malformed header");
    n = static_cast<int>(header.size()) - 1;
  }
  std::vector<std::vector<double>> cols(n);
  std::vector<double> vals;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string tok;
    for (int a = 0; a < n; ++a) {
      if (!std::getline(ls, tok, ','))
        throw ConfigError("csv: truncated row");
      cols[a].push_back(std::stod(tok));
    }
    if (!std::getline(ls, tok, ',')) throw ConfigError("csv: truncated row");
    vals.push_back(std::stod(tok));
  }
  Grid g;
  for (int a = 0; a < n; ++a) {
    std::vector<double> uniq;
    for (double v : cols[a])
      if (uniq.empty() ||
          std::find(uniq.begin(), uniq.end(), v) == uniq.end())
        uniq.push_back(v);
    std::sort(uniq.begin(), uniq.end());
    Vector ax(uniq.size());
    for (size_t i = 0; i < uniq.size(); ++i) ax[i] = uniq[i];
    g.axes.push_back(ax);
  }
  validate_grid(g);
  if (g.size() != static_cast<Eigen::Index>(vals.size()))
    throw ConfigError("csv: row count does not fill the grid");
  GridDensity out;
  out.grid = g;
  out.values =
      Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  return out;
}

}  // namespace densteer
