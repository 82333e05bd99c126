#include "densteer/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "densteer/brunovsky.hpp"

namespace densteer {

namespace {

// Linear-domain factor floor: finite log factors are clamped here so the
// linear reading stays a normal positive double.
constexpr double kLogFactorFloor = -690.0;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// Rethrows the callable's failures with the pipeline stage name prefixed,
// preserving the error type (and a ConvergenceError's history).
template <class F>
auto stage(const char* name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  } catch (const DomainError& e) {
    throw DomainError(std::string(name) + ": " + e.what());
  } catch (const ConvergenceError& e) {
    throw ConvergenceError(std::string(name) + ": " + e.what(), e.history);
  }
}

}  // namespace

Vector log_marginal(const GridDensity& d, double support_floor) {
  const double peak = d.values.size() ? d.values.maxCoeff() : 0.0;
  if (!(peak > 0.0)) {
    throw DomainError("log_marginal: density has no positive node");
  }
  const double cut = support_floor * peak;
  Vector out(d.values.size());
  for (Eigen::Index i = 0; i < d.values.size(); ++i) {
    const double v = d.values[i];
    if (v < 0.0 || !std::isfinite(v)) {
      throw DomainError("log_marginal: invalid node value " + fmt(v));
    }
    out[i] = v > cut ? std::log(v) : kNegInf;
  }
  return out;
}

BridgeFactors fixed_point(const KernelOperator& K01, const GridDensity& s0,
                          const GridDensity& s1, double delta, int max_iter,
                          const Vector& init_log_h1) {
  if (!grids_match(K01.source, K01.target)) {
    throw ConfigError("fixed_point: kernel must map a grid to itself");
  }
  if (!grids_match(s0.grid, K01.source) || !grids_match(s1.grid, K01.source)) {
    throw ConfigError("fixed_point: marginals must live on the kernel grid");
  }
  if (!(delta > 0.0)) throw ConfigError("fixed_point: delta must be positive");
  if (max_iter < 1) throw ConfigError("fixed_point: max_iter must be >= 1");

  const Eigen::Index N = K01.source.size();
  const Vector logs0 = log_marginal(s0);
  const Vector logs1 = log_marginal(s1);

  // Accumulated forward image K^T h0, seeded by the caller (ones when empty).
  Vector log_acc1;
  if (init_log_h1.size() == 0) {
    log_acc1 = Vector::Zero(N);
  } else if (init_log_h1.size() == N) {
    log_acc1 = init_log_h1;
  } else {
    throw ConfigError("fixed_point: init factor size mismatch");
  }

  BridgeFactors out;
  out.grid = K01.source;
  Vector log_h0 = Vector::Constant(N, kNegInf);
  Vector log_h1 = Vector::Constant(N, kNegInf);
  Vector prev_h0, prev_h1;

  // Alternating balance sweeps contract at a rate that approaches one as
  // eps shrinks; successive over-relaxation on the log factors removes the
  // eps dependence.  A plain warmup phase measures the sweep rate mu, and
  // the classical optimum for a two-block sweep (Jacobi radius sqrt(mu))
  // follows, nudged high because the contraction degrades steeply from
  // below the optimum and only linearly from above.  Extrapolation keeps
  // every fixed point of the plain sweep, so the converged factors and the
  // post-hoc residuals are unaffected by the acceleration.
  constexpr int kWarmupSweeps = 60;
  constexpr int kRateWindow = 20;
  double omega = 1.0;
  double guard_change = std::numeric_limits<double>::infinity();
  int small_streak = 0;

  bool converged = false;
  for (int it = 1; it <= max_iter; ++it) {
    for (Eigen::Index i = 0; i < N; ++i) {
      if (logs1[i] == kNegInf) {
        log_h1[i] = kNegInf;
        continue;
      }
      if (log_acc1[i] == kNegInf) {
        throw DomainError(
            "fixed_point: kernel image vanished inside the right support "
            "(grid truncation starves the balance update)");
      }
      const double plain = std::max(logs1[i] - log_acc1[i], kLogFactorFloor);
      log_h1[i] = omega == 1.0 || log_h1[i] == kNegInf
                      ? plain
                      : std::max(plain + (omega - 1.0) * (plain - log_h1[i]),
                                 kLogFactorFloor);
    }
    // Backward image of h1 at time 0; the transposed action reuses the
    // shared-grid quadrature.
    const Vector log_acc0 = K01.applyT_log(log_h1);
    for (Eigen::Index i = 0; i < N; ++i) {
      if (logs0[i] == kNegInf) {
        log_h0[i] = kNegInf;
        continue;
      }
      if (log_acc0[i] == kNegInf) {
        throw DomainError(
            "fixed_point: kernel image vanished inside the left support "
            "(grid truncation starves the balance update)");
      }
      const double plain = std::max(logs0[i] - log_acc0[i], kLogFactorFloor);
      log_h0[i] = omega == 1.0 || log_h0[i] == kNegInf
                      ? plain
                      : std::max(plain + (omega - 1.0) * (plain - log_h0[i]),
                                 kLogFactorFloor);
    }
    // Forward image of h0 at time 1.
    log_acc1 = K01.apply_log(log_h0);

    // Sup-norm relative change over the supported nodes; the first sweep has
    // nothing to compare against and never counts as converged.
    double change = std::numeric_limits<double>::infinity();
    if (prev_h0.size()) {
      change = 0.0;
      for (Eigen::Index i = 0; i < N; ++i) {
        if (log_h0[i] != kNegInf) {
          change = std::max(change, std::abs(std::expm1(log_h0[i] - prev_h0[i])));
        }
        if (log_h1[i] != kNegInf) {
          change = std::max(change, std::abs(std::expm1(log_h1[i] - prev_h1[i])));
        }
      }
    }
    out.history.push_back(change);
    out.iterations = it;
    prev_h0 = log_h0;
    prev_h1 = log_h1;
    if (change <= delta) {
      // Relaxed sweeps move in damped oscillations, so one small step can
      // be a crossing rather than arrival; ask for two in a row.
      if (omega == 1.0 || ++small_streak >= 2) {
        converged = true;
        break;
      }
    } else {
      small_streak = 0;
    }

    if (omega > 1.0) {
      guard_change = std::min(guard_change, change);
      if (!(change < 1e3 * guard_change)) omega = 1.0;  // runaway: relax off
    } else if (it == kWarmupSweeps && max_iter > 2 * kWarmupSweeps) {
      const double early = out.history[it - 1 - kRateWindow];
      const double late = out.history[it - 1];
      if (std::isfinite(early) && late > 0.0 && late < early) {
        const double mu = std::pow(late / early, 1.0 / kRateWindow);
        if (mu > 0.3 && mu < 1.0) {
          omega = std::min(1.01 * 2.0 / (1.0 + std::sqrt(1.0 - mu)), 1.95);
          guard_change = late;
        }
      }
    }
  }
  if (!converged) {
    throw ConvergenceError(
        "fixed_point: no convergence after " + std::to_string(max_iter) +
            " iterations (last sup change " + fmt(out.history.back()) + ")",
        out.history);
  }

  // Gauge: the product h0*h1 fixes only the ratio of scales, so pin the
  // larger factor of h0 to one.
  const double shift = log_h0.maxCoeff();
  for (Eigen::Index i = 0; i < N; ++i) {
    if (log_h0[i] != kNegInf) log_h0[i] -= shift;
    if (log_h1[i] != kNegInf) log_h1[i] += shift;
  }
  out.log_h0 = log_h0;
  out.log_h1 = log_h1;

  const Vector img0 = K01.applyT_log(log_h1);
  const Vector img1 = K01.apply_log(log_h0);
  double r0 = 0.0, r1 = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const double m0 = log_h0[i] == kNegInf ? 0.0 : std::exp(log_h0[i] + img0[i]);
    const double m1 = log_h1[i] == kNegInf ? 0.0 : std::exp(log_h1[i] + img1[i]);
    r0 = std::max(r0, std::abs(m0 - s0.values[i]));
    r1 = std::max(r1, std::abs(m1 - s1.values[i]));
  }
  out.residual_h0 = r0;
  out.residual_h1 = r1;
  return out;
}

ZFactors recover_factors(const BridgeFactors& hat, const Grid& zgrid, int n) {
  if (hat.grid.dim() != n || zgrid.dim() != n) {
    throw ConfigError("recover_factors: dimension mismatch");
  }
  const auto [T0, T1] = whitening_maps(n);
  const Matrix M10 = gramian_closed_form(n, 1.0, 0.0);
  const Eigen::LLT<Matrix> llt(M10);
  double half_logdet = 0.0;
  for (int i = 0; i < n; ++i) half_logdet += std::log(llt.matrixL()(i, i));

  const Vector lo = hat.grid.lower();
  const Vector hi = hat.grid.upper();
  ZFactors out;
  out.grid = zgrid;
  const Eigen::Index N = zgrid.size();
  out.log_h0.resize(N);
  out.log_h1.resize(N);
  for (Eigen::Index k = 0; k < N; ++k) {
    const Vector z = zgrid.node(k);
    Vector e0 = T0 * z;
    Vector e1 = T1 * z;
    bool moved = false;
    for (int a = 0; a < n; ++a) {
      const double c0 = std::clamp(e0[a], lo[a], hi[a]);
      const double c1 = std::clamp(e1[a], lo[a], hi[a]);
      moved = moved || c0 != e0[a] || c1 != e1[a];
      e0[a] = c0;
      e1[a] = c1;
    }
    if (moved) ++out.clamped;
    out.log_h0[k] = interp_multilinear(hat.grid, hat.log_h0, e0, kNegInf);
    const double lh1 = interp_multilinear(hat.grid, hat.log_h1, e1, kNegInf);
    // The whitening map carries a constant Jacobian; it lands on one factor
    // so the product transforms as a density.
    out.log_h1[k] = lh1 == kNegInf ? kNegInf : lh1 - half_logdet;
  }
  return out;
}

namespace {

// Derivative along the last (input-channel) axis by central differences,
// one-sided against the hull or next to non-finite neighbors, zero when no
// finite neighbor remains.
Vector last_axis_derivative(const Grid& g, const Vector& field) {
  const Eigen::Index cn = g.count(g.dim() - 1);
  const double h = g.spacing(g.dim() - 1);
  const Eigen::Index N = g.size();
  Vector out = Vector::Zero(N);
  for (Eigen::Index k = 0; k < N; ++k) {
    const Eigen::Index i = k % cn;
    const double fc = field[k];
    const double fp = i + 1 < cn ? field[k + 1] : kNegInf;
    const double fm = i > 0 ? field[k - 1] : kNegInf;
    const bool okp = std::isfinite(fp);
    const bool okm = std::isfinite(fm);
    if (okp && okm) {
      out[k] = (fp - fm) / (2.0 * h);
    } else if (okp && std::isfinite(fc)) {
      out[k] = (fp - fc) / h;
    } else if (okm && std::isfinite(fc)) {
      out[k] = (fc - fm) / h;
    }
  }
  return out;
}

// Shared slice epilogue: mass gate, then park the control at zero outside
// the support, where the fields underneath are noise-dominated.
void finish_slice(TransientSlice& out, const Grid& g, double t) {
  const double mass = out.sigma.values.sum() * g.cell_volume();
  if (!(mass > 0.0) || !std::isfinite(mass)) {
    throw DomainError("transient: snapshot carries no mass at t = " + fmt(t));
  }
  out.sigma.raw_mass = mass;
  const double peak = out.sigma.values.maxCoeff();
  for (Eigen::Index k = 0; k < out.sigma.values.size(); ++k) {
    if (out.sigma.values[k] < 1e-12 * peak) out.v[k] = 0.0;
  }
}

// log of sum_i exp(logfac_i) N(.; ., cov) vol, evaluated at every node.
// Forward orientation places the eval point in the kernel's first argument
// (field(z) = sum_i fac_i N(z; A z_i, cov)); backward places it in the
// mapped argument (field(z) = sum_i fac_i N(z_i; A z, cov)).  Node-point
// quadrature: the factor fields this feeds are diagnostics, not masses.
Vector point_propagation(const Grid& g, const Matrix& nodes,
                         const Vector& logfac, const Matrix& map,
                         const Matrix& cov, bool forward) {
  const Eigen::Index N = nodes.rows();
  const int n = static_cast<int>(nodes.cols());
  Eigen::LLT<Matrix> llt(cov);
  if (llt.info() != Eigen::Success) {
    throw DomainError("transient: degenerate propagation covariance");
  }
  double half_logdet = 0.0;
  for (int a = 0; a < n; ++a) half_logdet += std::log(llt.matrixL()(a, a));
  const double norm = -0.5 * n * std::log(2.0 * M_PI) - half_logdet +
                      std::log(g.cell_volume());
  // Whitened coordinates turn the quadratic form into a squared distance
  // between rows, so the pair sweep becomes one chunked matrix product.
  const Matrix mapped =
      llt.matrixL().solve(map * nodes.transpose()).transpose();
  const Matrix plain = llt.matrixL().solve(nodes.transpose()).transpose();
  const Matrix& U = forward ? plain : mapped;   // eval side
  const Matrix& V = forward ? mapped : plain;   // summation side
  Vector bias(N);
  for (Eigen::Index i = 0; i < N; ++i) {
    bias[i] = logfac[i] == kNegInf
                  ? kNegInf
                  : logfac[i] - 0.5 * V.row(i).squaredNorm();
  }
  Vector out(N);
  const Eigen::Index chunk = 256;
  for (Eigen::Index k0 = 0; k0 < N; k0 += chunk) {
    const Eigen::Index m = std::min(chunk, N - k0);
    const Matrix block = U.middleRows(k0, m) * V.transpose();
    for (Eigen::Index r = 0; r < m; ++r) {
      double mx = kNegInf;
      for (Eigen::Index i = 0; i < N; ++i) {
        if (bias[i] == kNegInf) continue;
        mx = std::max(mx, bias[i] + block(r, i));
      }
      if (mx == kNegInf) {
        out[k0 + r] = kNegInf;
        continue;
      }
      double acc = 0.0;
      for (Eigen::Index i = 0; i < N; ++i) {
        if (bias[i] == kNegInf) continue;
        acc += std::exp(bias[i] + block(r, i) - mx);
      }
      out[k0 + r] = mx + std::log(acc) + norm -
                    0.5 * U.row(k0 + r).squaredNorm();
    }
  }
  return out;
}

}  // namespace

TransientSlice transient(const ZFactors& zf, double t, double eps,
                         bool gradient_of_log, const KernelOperator* coupling) {
  if (!(t >= 0.0 && t <= 1.0)) {
    throw ConfigError("transient: time must lie in [0, 1]");
  }
  if (!(eps > 0.0)) throw ConfigError("transient: eps must be positive");

  const Grid& g = zf.grid;
  const int n = g.dim();
  const Eigen::Index N = g.size();

  KernelOperator local;
  if (coupling) {
    if (!grids_match(coupling->source, g) ||
        !grids_match(coupling->target, g) || coupling->epsilon != eps ||
        coupling->s != 0.0 || coupling->t != 1.0) {
      throw ConfigError("transient: coupling operator does not match");
    }
  } else {
    local = prior_coupling_operator(g, g, 0.0, 1.0, eps);
    coupling = &local;
  }

  TransientSlice out;
  out.t = t;
  out.sigma.grid = g;

  // Endpoint slices reuse the balance operator, so sigma(0) and sigma(1)
  // reproduce the converged marginals to the solver tolerance.
  if (t <= 0.0 || t >= 1.0) {
    if (t <= 0.0) {
      out.log_hhat = zf.log_h0;
      out.log_h = coupling->applyT_log(zf.log_h1);
    } else {
      out.log_hhat = coupling->apply_log(zf.log_h0);
      out.log_h = zf.log_h1;
    }
    out.sigma.values.resize(N);
    for (Eigen::Index k = 0; k < N; ++k) {
      const double s = out.log_hhat[k] + out.log_h[k];
      out.sigma.values[k] = std::isnan(s) || s == kNegInf ? 0.0 : std::exp(s);
    }
    if (gradient_of_log) {
      out.v = 2.0 * eps * last_axis_derivative(g, out.log_h);
    } else {
      Vector lin(N);
      for (Eigen::Index k = 0; k < N; ++k) {
        lin[k] = out.log_h[k] == kNegInf ? 0.0 : std::exp(out.log_h[k]);
      }
      out.v = 2.0 * eps * last_axis_derivative(g, lin);
    }
    finish_slice(out, g, t);
    return out;
  }

  // Interior slice: the pair (i, j) holds mass h0_i w_ij h1_j, and the
  // prior bridge pinned at (z_i, z_j) is Gaussian at time t with mean
  // P(t) z_i + Q(t) z_j and a covariance independent of the pair.  The
  // slice is that mixture: atoms deposited multilinearly, then spread by
  // one Gaussian smoothing.  Its mass telescopes to the pair-mass total,
  // whereas composing independently integrated kernels pays their
  // tail-quadrature mismatch, which reaches destructive size once the
  // endpoint displacement is hundreds of kernel deviations.
  const InterpolationMatrices pq = interp_matrices(n, t);
  const Matrix phi1t = state_transition(n, 1.0, t);
  const Matrix m1t = gramian_closed_form(n, 1.0, t);
  const Matrix mt0 = gramian_closed_form(n, t, 0.0);
  const Matrix m10 = gramian_closed_form(n, 1.0, 0.0);
  Matrix cov =
      2.0 * eps *
      (mt0 - mt0 * phi1t.transpose() * m10.llt().solve(phi1t * mt0));
  cov = 0.5 * (cov + cov.transpose()).eval();

  // The smoother integrates its source cells, convolving every deposited
  // atom with the cell box; shaving the box variance off the spreading
  // kernel keeps the composite second moment exactly the bridge one.  The
  // eigenvalue floor engages when the bridge kernel is already narrower
  // than a cell, where the box is the resolution limit anyway.
  Matrix blur_cov = cov;
  double hmin2 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < n; ++a) {
    const double ha = g.spacing(a);
    blur_cov(a, a) -= ha * ha / 12.0;
    hmin2 = std::min(hmin2, ha * ha);
  }
  const Eigen::SelfAdjointEigenSolver<Matrix> es(blur_cov);
  const double floor_ev = 1e-4 * hmin2;
  if (es.eigenvalues().minCoeff() < floor_ev) {
    blur_cov = es.eigenvectors() *
               es.eigenvalues().cwiseMax(floor_ev).asDiagonal() *
               es.eigenvectors().transpose();
    blur_cov = 0.5 * (blur_cov + blur_cov.transpose()).eval();
  }

  Matrix nodes(N, n);
  for (Eigen::Index k = 0; k < N; ++k) nodes.row(k) = g.node(k).transpose();
  const Matrix pz = nodes * pq.P.transpose();
  const Matrix qz = nodes * pq.Q.transpose();

  // Pass one: the log peak over pairs; pass two: scatter every pair within
  // 46 nats of it (the rest contribute below 1e-20 of the peak mass).
  const auto& rm = coupling->log_weights_rm;
  const Vector& lh0 = zf.log_h0;
  const Vector& lh1 = zf.log_h1;
  const auto lh0t = lh0.transpose().array();
  double gmax = kNegInf;
  for (Eigen::Index j = 0; j < N; ++j) {
    if (lh1[j] == kNegInf) continue;
    const double rowmax = (rm.row(j).array() + lh0t).maxCoeff();
    gmax = std::max(gmax, rowmax + lh1[j]);
  }
  if (gmax == kNegInf) {
    throw DomainError("transient: factor product carries no mass at t = " +
                      fmt(t));
  }

  const Vector lo = g.lower();
  Vector mass_field = Vector::Zero(N);
  Matrix payload = Matrix::Zero(N, n);
  std::vector<Eigen::Index> base(static_cast<size_t>(n));
  std::vector<double> frac(static_cast<size_t>(n));
  const double cut = gmax - 46.0;
  for (Eigen::Index j = 0; j < N; ++j) {
    if (lh1[j] == kNegInf) continue;
    const double bias = lh1[j];
    for (Eigen::Index i = 0; i < N; ++i) {
      const double lp = rm(j, i) + lh0[i] + bias;
      if (lp < cut) continue;
      const double p = std::exp(lp);
      bool inside = true;
      for (int a = 0; a < n; ++a) {
        const double top = static_cast<double>(g.count(a) - 1);
        const double u = (pz(i, a) + qz(j, a) - lo[a]) / g.spacing(a);
        if (!(u >= -1e-9) || u > top + 1e-9) {
          inside = false;  // atoms beyond the grid are genuine truncation
          break;
        }
        const double uc = std::min(std::max(u, 0.0), top);
        base[a] = std::min<Eigen::Index>(static_cast<Eigen::Index>(uc),
                                         g.count(a) - 2);
        frac[a] = uc - static_cast<double>(base[a]);
      }
      if (!inside) continue;
      for (unsigned m = 0; m < (1u << n); ++m) {
        double w = p;
        Eigen::Index k = 0;
        for (int a = 0; a < n; ++a) {
          const bool up = (m >> a) & 1u;
          w *= up ? frac[a] : 1.0 - frac[a];
          k = k * g.count(a) + base[a] + (up ? 1 : 0);
        }
        if (w == 0.0) continue;
        mass_field[k] += w;
        payload.row(k) += w * nodes.row(j);
      }
    }
  }

  const KernelOperator blur = gaussian_smoother(g, cov);
  out.sigma.values = blur.apply(mass_field);
  Matrix ybar(N, n);
  for (int a = 0; a < n; ++a) ybar.col(a) = blur.apply(Vector(payload.col(a)));

  // Diagnostic factor fields by point-kernel quadrature.  Their product is
  // not the slice density in the deep tail; sigma above is authoritative.
  out.log_hhat = point_propagation(g, nodes, lh0,
                                   state_transition(n, t, 0.0),
                                   2.0 * eps * mt0, true);
  out.log_h = point_propagation(g, nodes, lh1, phi1t, 2.0 * eps * m1t, false);

  // v = b' Phi(1,t)' M(1,t)^{-1} (E[z(1) | z, t] - Phi(1,t) z), the
  // h-transform drift through the conditional endpoint mean.
  if (gradient_of_log) {
    Vector bn = Vector::Zero(n);
    bn[n - 1] = 1.0;
    const Vector row = m1t.llt().solve(phi1t * bn);
    const Matrix phz = nodes * phi1t.transpose();
    out.v = Vector::Zero(N);
    for (Eigen::Index k = 0; k < N; ++k) {
      const double s = out.sigma.values[k];
      if (s > 0.0) {
        out.v[k] = row.dot(ybar.row(k).transpose() / s -
                           phz.row(k).transpose());
      }
    }
  } else {
    Vector lin(N);
    for (Eigen::Index k = 0; k < N; ++k) {
      lin[k] = out.log_h[k] == kNegInf ? 0.0 : std::exp(out.log_h[k]);
    }
    out.v = 2.0 * eps * last_axis_derivative(g, lin);
  }
  finish_slice(out, g, t);
  return out;
}

double control_cost(const std::vector<TransientSlice>& slices) {
  if (slices.size() < 2) {
    throw ConfigError("control_cost: needs at least two time slices");
  }
  std::vector<double> energy(slices.size());
  for (std::size_t i = 0; i < slices.size(); ++i) {
    if (i && !(slices[i].t > slices[i - 1].t)) {
      throw ConfigError("control_cost: slices must be strictly time-sorted");
    }
    const GridDensity& sg = slices[i].sigma;
    energy[i] = 0.5 * slices[i].v.array().square().matrix().dot(sg.values) *
                sg.grid.cell_volume();
  }
  double cost = 0.0;
  for (std::size_t i = 1; i < slices.size(); ++i) {
    cost += 0.5 * (energy[i] + energy[i - 1]) * (slices[i].t - slices[i - 1].t);
  }
  return cost;
}

namespace {

// Endpoint state-space snapshot: the steering solution's endpoint equals the
// target marginal up to the balance residual, so rather than pulling the
// interpolated slice back (which pays the full interpolation error twice),
// reweight the discretized target by the interpolated density ratio.
GridDensity endpoint_state_density(const GridDensity& rho_target,
                                   const GridDensity& sigma_target,
                                   const TransientSlice& slice,
                                   const FeedbackLinearizingTuple& tuple) {
  const Vector log_base = log_marginal(sigma_target);
  Vector log_ratio(slice.log_h.size());
  for (Eigen::Index i = 0; i < log_ratio.size(); ++i) {
    const double ls = slice.log_hhat[i] + slice.log_h[i];
    log_ratio[i] =
        std::isnan(ls) || ls == kNegInf || log_base[i] == kNegInf
            ? 0.0
            : ls - log_base[i];
  }
  GridDensity out;
  out.grid = rho_target.grid;
  out.values.resize(rho_target.values.size());
  for (Eigen::Index k = 0; k < out.values.size(); ++k) {
    const double r =
        interp_multilinear(slice.sigma.grid, log_ratio,
                           tuple.tau(rho_target.grid.node(k)), 0.0);
    out.values[k] = rho_target.values[k] * std::exp(r);
  }
  out.raw_mass = out.values.sum() * out.grid.cell_volume();
  return out;
}

}  // namespace

BridgeSolution steer_pipeline(const Scenario& sc) {
  if (sc.snapshots.empty()) {
    throw ConfigError("steer_pipeline: no snapshot times requested");
  }
  for (std::size_t i = 0; i < sc.snapshots.size(); ++i) {
    const double t = sc.snapshots[i];
    if (!(t >= 0.0 && t <= 1.0)) {
      throw ConfigError("steer_pipeline: snapshot time " + fmt(t) +
                        " outside [0, 1]");
    }
    if (i && !(t > sc.snapshots[i - 1])) {
      throw ConfigError("steer_pipeline: snapshot times must increase");
    }
  }
  if (!(sc.epsilon > 0.0)) {
    throw ConfigError("steer_pipeline: epsilon must be positive");
  }

  BridgeSolution sol;
  sol.epsilon = sc.epsilon;
  const int n = sc.zgrid.dim();

  const FeedbackLinearizingTuple tuple = stage("linearize", [&] {
    return build_tuple(sc.sys, sc.lambda, sc.tuple_samples);
  });
  if (tuple.n != n) {
    throw ConfigError("steer_pipeline: steering grid dimension " +
                      std::to_string(n) + " does not match the system order " +
                      std::to_string(tuple.n));
  }

  stage("discretize", [&] {
    sol.rho0 = discretize(sc.rho0, sc.xgrid);
    sol.rho1 = discretize(sc.rho1, sc.xgrid);
  });

  stage("pushforward", [&] {
    sol.sigma0 = pushforward_diffeo(sol.rho0, tuple, sc.zgrid);
    sol.sigma1 = pushforward_diffeo(sol.rho1, tuple, sc.zgrid);
  });

  // Whitened stage: the Brownian-kernel iteration on the transformed
  // marginals does the heavy lifting cheaply (separable kernel).
  const auto hats = stage("whiten", [&] {
    return hat_marginals(sol.sigma0, sol.sigma1, n);
  });

  const BridgeFactors hat = stage("bridge", [&] {
    const KernelOperator Khat = brownian_operator(hats.first.grid,
                                                  hats.first.grid, 0.0, 1.0,
                                                  sc.epsilon);
    return fixed_point(Khat, hats.first, hats.second, sc.delta, sc.max_iter);
  });
  sol.iterations_hat = hat.iterations;
  sol.hat_residual_h0 = hat.residual_h0;
  sol.hat_residual_h1 = hat.residual_h1;
  sol.history = hat.history;

  const ZFactors warm = stage("recover", [&] {
    return recover_factors(hat, sc.zgrid, n);
  });
  sol.recover_clamped = warm.clamped;

  // Polish on the steering grid: the recovered factors carry interpolation
  // error whose scale grows like 1/epsilon, so rerun the balance iteration
  // against the linear-prior kernel.  The rerun starts from ones: seeding it
  // with the recovered factors plants that interpolation error on the
  // iteration's slowest modes and stalls it, while the cold start converges
  // at the plain rate.  Shares the iteration budget with the hat stage.
  const KernelOperator Kz = stage("polish", [&] {
    return prior_coupling_operator(sc.zgrid, sc.zgrid, 0.0, 1.0, sc.epsilon);
  });
  const BridgeFactors polished = stage("polish", [&] {
    const int remaining = sc.max_iter - sol.iterations_hat;
    if (remaining < 2) {
      throw ConvergenceError("iteration budget exhausted before the polish",
                             sol.history);
    }
    return fixed_point(Kz, sol.sigma0, sol.sigma1, sc.delta, remaining);
  });
  sol.iterations_polish = polished.iterations;
  sol.residual_h0 = polished.residual_h0;
  sol.residual_h1 = polished.residual_h1;
  sol.history.insert(sol.history.end(), polished.history.begin(),
                     polished.history.end());

  ZFactors zf;
  zf.grid = sc.zgrid;
  zf.log_h0 = polished.log_h0;
  zf.log_h1 = polished.log_h1;

  std::vector<TransientSlice> slices;
  slices.reserve(sc.snapshots.size());
  for (double t : sc.snapshots) {
    slices.push_back(stage("transient", [&] {
      return transient(zf, t, sc.epsilon, sc.gradient_of_log, &Kz);
    }));
  }

  TransientSlice extra0, extra1;
  const bool has0 = sc.snapshots.front() == 0.0;
  const bool has1 = sc.snapshots.back() == 1.0;
  if (!has0) {
    extra0 = stage("transient", [&] {
      return transient(zf, 0.0, sc.epsilon, sc.gradient_of_log, &Kz);
    });
  }
  if (!has1) {
    extra1 = stage("transient", [&] {
      return transient(zf, 1.0, sc.epsilon, sc.gradient_of_log, &Kz);
    });
  }
  const TransientSlice& first = has0 ? slices.front() : extra0;
  const TransientSlice& last = has1 ? slices.back() : extra1;
  sol.endpoint_l1_z0 = l1_distance(first.sigma, sol.sigma0);
  sol.endpoint_l1_z1 = l1_distance(last.sigma, sol.sigma1);

  for (std::size_t i = 0; i < slices.size(); ++i) {
    const double t = sc.snapshots[i];
    GridDensity rho = stage("pullback", [&] {
      if (t == 0.0) {
        return endpoint_state_density(sol.rho0, sol.sigma0, slices[i], tuple);
      }
      if (t == 1.0) {
        return endpoint_state_density(sol.rho1, sol.sigma1, slices[i], tuple);
      }
      return pullback_to_x(slices[i].sigma, tuple, sc.xgrid);
    });
    if (t == 0.0) sol.endpoint_l1_x0 = l1_distance(rho, sol.rho0);
    if (t == 1.0) sol.endpoint_l1_x1 = l1_distance(rho, sol.rho1);
    sol.times.push_back(t);
    sol.sigma.push_back(std::move(slices[i].sigma));
    sol.control.push_back(std::move(slices[i].v));
    sol.rho.push_back(std::move(rho));
  }

  for (std::size_t i = 0; i < sol.times.size(); ++i) {
    const double m = sol.sigma[i].raw_mass;
    if (std::abs(m - 1.0) > sc.masstol) {
      throw DomainError("steer_pipeline: snapshot at t = " + fmt(sol.times[i]) +
                        " has mass " + fmt(m) + " outside 1 +- " +
                        fmt(sc.masstol));
    }
  }
  return sol;
}

}  // namespace densteer
