#include "densteer/brunovsky.hpp"

namespace densteer {

namespace {

using MatrixL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;

void check_dim(int n) {
  if (n < 1)
    throw DomainError("state dimension must be positive, got " +
                      std::to_string(n));
  if (n > 8)
    throw ConfigError("state dimension capped at 8 (unit-interval Gramian "
                      "too ill-conditioned beyond that), got " +
                      std::to_string(n));
}

MatrixL nilpotent_exp_ld(int n, long double dt) {
  MatrixL E = MatrixL::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j)
      E(i, j) = std::pow(dt, j - i) / static_cast<long double>(factorial(j - i));
  return E;
}

MatrixL gramian_ld(int n, long double t, long double s) {
  MatrixL M(n, n);
  const long double dt = t - s;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int p = 2 * n - i - j - 1;
      M(i, j) = std::pow(dt, p) /
                static_cast<long double>(factorial(n - 1 - i) *
                                         factorial(n - 1 - j) * p);
    }
  }
  return M;
}

}  // namespace

BrunovskyPair brunovsky_pair(int n) {
  check_dim(n);
  BrunovskyPair p;
  p.A = Matrix::Zero(n, n);
  for (int i = 0; i + 1 < n; ++i) p.A(i, i + 1) = 1.0;
  p.b = Vector::Zero(n);
  p.b[n - 1] = 1.0;
  return p;
}

Matrix nilpotent_exp(int n, double dt) {
  check_dim(n);
  Matrix E = Matrix::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j)
      E(i, j) = std::pow(dt, j - i) / factorial(j - i);
  return E;
}

Matrix state_transition(int n, double t, double s) {
  check_dim(n);
  if (!(0.0 <= s && s <= t && t <= 1.0))
    throw DomainError("state_transition requires 0 <= s <= t <= 1, got s=" +
                      std::to_string(s) + ", t=" + std::to_string(t));
  return nilpotent_exp(n, t - s);
}

Matrix gramian_closed_form(int n, double t, double s) {
  check_dim(n);
  if (t < s)
    throw DomainError("gramian requires s <= t, got s=" + std::to_string(s) +
                      ", t=" + std::to_string(t));
  if (t == s) return Matrix::Zero(n, n);
  Matrix M(n, n);
  const double dt = t - s;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int p = 2 * n - i - j - 1;
      M(i, j) = std::pow(dt, p) /
                (factorial(n - 1 - i) * factorial(n - 1 - j) * p);
    }
  }
  return M;
}

Matrix gramian_quadrature(int n, double t, double s, int intervals) {
  check_dim(n);
  if (t < s)
    throw DomainError("gramian requires s <= t");
  if (intervals < 2 || intervals % 2 != 0)
    throw ConfigError("Simpson quadrature needs an even interval count >= 2");
  if (t == s) return Matrix::Zero(n, n);
  const Vector b = brunovsky_pair(n).b;
  const double h = (t - s) / intervals;
  auto integrand = [&](double r) -> Matrix {
    const Vector c = nilpotent_exp(n, t - r) * b;
    return c * c.transpose();
  };
  Matrix acc = integrand(s) + integrand(t);
  for (int k = 1; k < intervals; ++k)
    acc += (k % 2 == 1 ? 4.0 : 2.0) * integrand(s + k * h);
  return (h / 3.0) * acc;
}

Matrix spd_sqrt(const Matrix& S) {
  if (S.rows() != S.cols())
    throw DomainError("spd_sqrt requires a square matrix");
  Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
  if (eig.info() != Eigen::Success)
    throw DomainError("spd_sqrt: eigendecomposition failed");
  const Vector& lam = eig.eigenvalues();
  if (lam.minCoeff() <= 0.0)
    throw DomainError("spd_sqrt: matrix is not positive definite (min "
                      "eigenvalue " + std::to_string(lam.minCoeff()) + ")");
  return eig.eigenvectors() * lam.cwiseSqrt().asDiagonal() *
         eig.eigenvectors().transpose();
}

InterpolationMatrices interp_matrices(int n, double t) {
  check_dim(n);
  if (!(0.0 <= t && t <= 1.0))
    throw DomainError("interp_matrices requires t in [0, 1]");
  InterpolationMatrices out;
  // The formulas reduce to these exactly at the endpoints; pinning them
  // avoids paying the Gramian's conditioning there.
  if (t == 0.0) {
    out.P = Matrix::Identity(n, n);
    out.Q = Matrix::Zero(n, n);
    return out;
  }
  if (t == 1.0) {
    out.P = Matrix::Zero(n, n);
    out.Q = Matrix::Identity(n, n);
    return out;
  }
  const long double tl = t;
  const MatrixL M10 = gramian_ld(n, 1.0L, 0.0L);
  const Eigen::LLT<MatrixL> llt(M10);
  const MatrixL phi_10 = nilpotent_exp_ld(n, 1.0L);
  const MatrixL P = nilpotent_exp_ld(n, tl - 1.0L) *
                    (gramian_ld(n, 1.0L, tl) * llt.solve(phi_10));
  const MatrixL Q = gramian_ld(n, tl, 0.0L) *
                    (nilpotent_exp_ld(n, 1.0L - tl).transpose() *
                     llt.solve(MatrixL::Identity(n, n)));
  out.P = P.cast<double>();
  out.Q = Q.cast<double>();
  return out;
}

}  // namespace densteer
