#include "densteer/lie.hpp"

#include <sstream>

namespace densteer {

namespace {

std::string fmt_point(const Vector& x) {
  std::ostringstream os;
  os << "(";
  for (Eigen::Index i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << ")";
  return os.str();
}

// Symmetric perturbation of coordinate i with underflow detection; returns
// the pair used so the caller can divide by the realized width.
std::pair<Vector, Vector> bump(const Vector& x, Eigen::Index i, double h0) {
  const double h = h0 * std::max(1.0, std::abs(x[i]));
  Vector xp = x, xm = x;
  xp[i] += h;
  xm[i] -= h;
  if (!std::isfinite(xp[i]) || !std::isfinite(xm[i]) || !(xp[i] > x[i]) ||
      !(xm[i] < x[i]))
    throw DomainError("finite-difference step underflow at coordinate " +
                      std::to_string(i));
  return {xp, xm};
}

Vector fd_gradient(const ScalarField& phi, const Vector& x) {
  const double h0 = fd_step(phi.fd_depth);
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const auto [xp, xm] = bump(x, i, h0);
    g[i] = (phi.value(xp) - phi.value(xm)) / (xp[i] - xm[i]);
  }
  return g;
}

Matrix fd_jacobian(const VectorField& xi, const Vector& x) {
  const double h0 = fd_step(xi.fd_depth);
  Matrix J(xi.n, x.size());
  for (Eigen::Index j = 0; j < x.size(); ++j) {
    const auto [xp, xm] = bump(x, j, h0);
    J.col(j) = (xi.value(xp) - xi.value(xm)) / (xp[j] - xm[j]);
  }
  return J;
}

ScalarField lie_once(const ScalarField& phi, const VectorField& xi) {
  ScalarField out;
  out.n = phi.n;
  if (phi.gradient) {
    out.value = [phi, xi](const Vector& x) {
      return phi.gradient(x).dot(xi.value(x));
    };
    out.fd_depth = std::max(phi.fd_depth, xi.fd_depth);
  } else {
    out.value = [phi, xi](const Vector& x) {
      return fd_gradient(phi, x).dot(xi.value(x));
    };
    out.fd_depth = std::max(phi.fd_depth + 1, xi.fd_depth);
  }
  return out;
}

}  // namespace

double fd_step(int depth) { return std::pow(1e-5, 1.0 / (depth + 2)); }

Vector gradient_of(const ScalarField& phi, const Vector& x) {
  return phi.gradient ? phi.gradient(x) : fd_gradient(phi, x);
}

Matrix jacobian_of(const VectorField& xi, const Vector& x) {
  return xi.jacobian ? xi.jacobian(x) : fd_jacobian(xi, x);
}

ScalarField lie_field(const ScalarField& phi, const VectorField& xi, int k) {
  if (phi.n != xi.n)
    throw ConfigError("lie_field: field dimensions differ (" +
                      std::to_string(phi.n) + " vs " + std::to_string(xi.n) +
                      ")");
  if (k < 0) throw DomainError("lie_field: negative order");
  if (k > phi.n + 1)
    throw DomainError("lie_field: order " + std::to_string(k) +
                      " exceeds the smoothness budget n + 1 = " +
                      std::to_string(phi.n + 1));
  ScalarField cur = phi;
  for (int j = 0; j < k; ++j) cur = lie_once(cur, xi);
  return cur;
}

double lie_derivative(const ScalarField& phi, const VectorField& xi,
                      const Vector& x, int k) {
  return lie_field(phi, xi, k).value(x);
}

Vector lie_bracket(const VectorField& xi, const VectorField& eta,
                   const Vector& x) {
  if (xi.n != eta.n || x.size() != xi.n)
    throw ConfigError("lie_bracket: field dimensions differ");
  return jacobian_of(eta, x) * xi.value(x) - jacobian_of(xi, x) * eta.value(x);
}

VectorField ad_field(const VectorField& xi, const VectorField& eta, int k) {
  if (xi.n != eta.n) throw ConfigError("ad_field: field dimensions differ");
  if (k < 0) throw DomainError("ad_field: negative order");
  VectorField cur = eta;
  for (int j = 0; j < k; ++j) {
    VectorField prev = cur;
    VectorField next;
    next.n = eta.n;
    next.value = [xi, prev](const Vector& x) {
      return lie_bracket(xi, prev, x);
    };
    next.fd_depth = std::max(xi.fd_depth, prev.fd_depth) + 1;
    cur = next;
  }
  return cur;
}

Vector ad_power(const VectorField& xi, const VectorField& eta, int k,
                const Vector& x) {
  return ad_field(xi, eta, k).value(x);
}

LinearizabilityReport check_linearizable(const ControlAffineSystem& sys,
                                         const Vector& x_bar,
                                         const std::vector<Vector>& samples,
                                         double tol) {
  const int n = sys.n;
  if (sys.domain && !sys.domain(x_bar))
    throw DomainError("check_linearizable: expansion point " +
                      fmt_point(x_bar) + " outside the system domain");
  for (const auto& p : samples)
    if (sys.domain && !sys.domain(p))
      throw DomainError("check_linearizable: sample " + fmt_point(p) +
                        " outside the system domain");

  LinearizabilityReport rep;
  Matrix C(n, n);
  for (int j = 0; j < n; ++j) C.col(j) = ad_power(sys.f, sys.g, j, x_bar);
  Eigen::JacobiSVD<Matrix> svd(C);
  const Vector& sv = svd.singularValues();
  const double smax = sv.size() ? sv[0] : 0.0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv[i] > 1e-8 * smax) ++rep.rank;

  if (n >= 2) {
    std::vector<VectorField> span_fields;
    for (int j = 0; j <= n - 2; ++j)
      span_fields.push_back(ad_field(sys.f, sys.g, j));
    std::vector<Vector> pts = samples;
    pts.push_back(x_bar);
    for (const auto& p : pts) {
      Matrix D(n, n - 1);
      for (int j = 0; j < n - 1; ++j) D.col(j) = span_fields[j].value(p);
      double scale = 1.0;
      for (int j = 0; j < n - 1; ++j)
        scale = std::max(scale, D.col(j).norm());
      Eigen::JacobiSVD<Matrix> dsvd(D, Eigen::ComputeThinU);
      const Vector& dsv = dsvd.singularValues();
      int r = 0;
      for (Eigen::Index i = 0; i < dsv.size(); ++i)
        if (dsv[i] > 1e-12 * dsv[0]) ++r;
      const Matrix U = dsvd.matrixU().leftCols(r);
      for (int i = 0; i < n - 1; ++i) {
        for (int j = i + 1; j < n - 1; ++j) {
          const Vector w = lie_bracket(span_fields[i], span_fields[j], p);
          const Vector orth = w - U * (U.transpose() * w);
          rep.involutivity_residual =
              std::max(rep.involutivity_residual, orth.norm() / scale);
        }
      }
    }
  }
  rep.pass = (rep.rank == n) && (rep.involutivity_residual <= tol);
  return rep;
}

FeedbackLinearizingTuple build_tuple(const ControlAffineSystem& sys,
                                     const ScalarField& lambda,
                                     const std::vector<Vector>& samples,
                                     double tol) {
  const int n = sys.n;
  if (lambda.n != n)
    throw ConfigError("build_tuple: lambda dimension " +
                      std::to_string(lambda.n) + " does not match system " +
                      std::to_string(n));

  std::vector<ScalarField> taus(n);
  taus[0] = lambda;
  for (int k = 1; k < n; ++k) taus[k] = lie_once(taus[k - 1], sys.f);
  const ScalarField lfn = lie_once(taus[n - 1], sys.f);
  const ScalarField den = lie_once(taus[n - 1], sys.g);

  for (const auto& p : samples) {
    for (int k = 0; k <= n - 2; ++k) {
      const double val = lie_once(taus[k], sys.g).value(p);
      if (std::abs(val) > tol)
        throw DomainError(
            "build_tuple: relative degree check failed: |L_g L_f^" +
            std::to_string(k) + " lambda| = " + std::to_string(std::abs(val)) +
            " > " + std::to_string(tol) + " at " + fmt_point(p));
    }
    const double d = den.value(p);
    if (!(std::abs(d) > tol))
      throw DomainError(
          "build_tuple: relative degree check failed: |L_g L_f^" +
          std::to_string(n - 1) + " lambda| = " + std::to_string(std::abs(d)) +
          " <= " + std::to_string(tol) + " at " + fmt_point(p));
  }

  FeedbackLinearizingTuple tuple;
  tuple.n = n;
  tuple.lambda = lambda;
  tuple.tau = [taus, n](const Vector& x) {
    Vector z(n);
    for (int k = 0; k < n; ++k) z[k] = taus[k].value(x);
    return z;
  };
  auto den_checked = [den](const Vector& x) {
    const double d = den.value(x);
    if (std::abs(d) < 1e-12)
      throw DomainError("linearization singular: decoupling term " +
                        std::to_string(d) + " at " + fmt_point(x));
    return d;
  };
  tuple.alpha = [lfn, den_checked](const Vector& x) {
    return -lfn.value(x) / den_checked(x);
  };
  tuple.beta = [den_checked](const Vector& x) { return 1.0 / den_checked(x); };
  tuple.jacobian_tau = [taus, n](const Vector& x) {
    Matrix J(n, n);
    for (int k = 0; k < n; ++k) J.row(k) = gradient_of(taus[k], x).transpose();
    return J;
  };
  return tuple;
}

Vector tau_inverse(const FeedbackLinearizingTuple& tuple, const Vector& z,
                   const Vector& guess, double tol, int max_iter) {
  if (z.size() != tuple.n || guess.size() != tuple.n)
    throw ConfigError("tau_inverse: dimension mismatch");
  auto F = [&tuple, &z](const Vector& x) -> Vector { return tuple.tau(x) - z; };
  const NewtonResult res =
      newton_solve(F, tuple.jacobian_tau, guess, tol, max_iter);
  if (!res.converged ||
      (tuple.tau(res.x) - z).cwiseAbs().maxCoeff() > tol)
    throw ConvergenceError("tau_inverse: Newton stalled after " +
                               std::to_string(res.iterations) +
                               " iterations at residual " +
                               std::to_string(res.residual_trace.back()) +
                               " for z = " + fmt_point(z),
                           res.residual_trace);
  return res.x;
}

double recover_control(const FeedbackLinearizingTuple& tuple,
                       const std::function<double(const Vector&, double)>& v,
                       const Vector& x, double t) {
  return tuple.alpha(x) + tuple.beta(x) * v(tuple.tau(x), t);
}

}  // namespace densteer
