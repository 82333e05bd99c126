#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "densteer/brunovsky.hpp"
#include "helpers.hpp"

using namespace densteer;

TEST_CASE("chain pair has shift structure") {
  for (int n = 1; n <= 8; ++n) {
    const auto p = brunovsky_pair(n);
    REQUIRE(p.A.rows() == n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        CHECK(p.A(i, j) == (j == i + 1 ? 1.0 : 0.0));
    for (int i = 0; i < n; ++i) CHECK(p.b[i] == (i == n - 1 ? 1.0 : 0.0));
  }
  CHECK_THROWS_AS(brunovsky_pair(0), DomainError);
  CHECK_THROWS_AS(brunovsky_pair(-2), DomainError);
  CHECK_THROWS_AS(brunovsky_pair(9), ConfigError);
}

TEST_CASE("nilpotent_exp matches truncated exponential series") {
  auto gen = testutil::rng();
  std::uniform_real_distribution<double> dist(-1.5, 1.5);
  for (int n = 1; n <= 8; ++n) {
    const auto p = brunovsky_pair(n);
    for (int rep = 0; rep < 5; ++rep) {
      const double dt = dist(gen);
      const Matrix E = nilpotent_exp(n, dt);
      const Matrix ref = testutil::exp_series(p.A, dt);
      CHECK((E - ref).cwiseAbs().maxCoeff() < 1e-13);
    }
  }
}

TEST_CASE("transition for a 3-chain over the unit interval") {
  const Matrix E = nilpotent_exp(3, 1.0);
  Matrix expect(3, 3);
  expect << 1, 1, 0.5, 0, 1, 1, 0, 0, 1;
  CHECK((E - expect).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("state_transition rejects reversed or out-of-range times") {
  CHECK_THROWS_AS(state_transition(2, 0.2, 0.5), DomainError);
  CHECK_THROWS_AS(state_transition(2, 1.2, 0.5), DomainError);
  CHECK_THROWS_AS(state_transition(2, 0.5, -0.1), DomainError);
  CHECK_NOTHROW(state_transition(2, 0.5, 0.5));
}

TEST_CASE("transition composes over adjacent intervals") {
  for (int n = 2; n <= 5; ++n) {
    const Matrix a = state_transition(n, 0.9, 0.4);
    const Matrix b = state_transition(n, 0.4, 0.1);
    const Matrix c = state_transition(n, 0.9, 0.1);
    CHECK((a * b - c).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("closed-form Gramian for a 2-chain on the unit interval") {
  const Matrix M = gramian_closed_form(2, 1.0, 0.0);
  CHECK(M(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(M(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(M(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(M(1, 1) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("closed-form Gramian matches Simpson quadrature") {
  struct Case {
    int n;
    double t, s;
  };
  const Case cases[] = {{1, 1.0, 0.0}, {2, 1.0, 0.0},  {3, 0.7, 0.2},
                        {4, 1.0, 0.3}, {6, 0.9, 0.05}, {8, 1.0, 0.0}};
  for (const auto& c : cases) {
    const Matrix closed = gramian_closed_form(c.n, c.t, c.s);
    const Matrix quad = gramian_quadrature(c.n, c.t, c.s, 400);
    const double scale = closed.cwiseAbs().maxCoeff();
    CHECK((closed - quad).cwiseAbs().maxCoeff() / scale < 1e-9);
  }
  CHECK_THROWS_AS(gramian_quadrature(2, 1.0, 0.0, 3), ConfigError);
  CHECK_THROWS_AS(gramian_closed_form(2, 0.2, 0.3), DomainError);
  CHECK_THROWS_AS(gramian_quadrature(2, 0.2, 0.3, 10), DomainError);
}

TEST_CASE("Gramian over an empty interval is the zero matrix") {
  for (int n : {1, 3, 8}) {
    CHECK(gramian_closed_form(n, 0.4, 0.4).cwiseAbs().maxCoeff() == 0.0);
    CHECK(gramian_quadrature(n, 0.4, 0.4, 10).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("Gramian is symmetric positive definite") {
  for (int n = 1; n <= 8; ++n) {
    const Matrix M = gramian_closed_form(n, 1.0, 0.0);
    CHECK((M - M.transpose()).cwiseAbs().maxCoeff() == 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(M);
    CHECK(eig.eigenvalues().minCoeff() > 0.0);
  }
}

TEST_CASE("spd_sqrt squares back to the input") {
  auto gen = testutil::rng(7u);
  std::normal_distribution<double> dist;
  for (int n = 1; n <= 6; ++n) {
    Matrix B(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) B(i, j) = dist(gen);
    const Matrix S = B * B.transpose() + Matrix::Identity(n, n);
    const Matrix R = spd_sqrt(S);
    CHECK((R - R.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((R * R - S).cwiseAbs().maxCoeff() < 1e-10 * S.norm());
  }
  Matrix neg(2, 2);
  neg << 1, 0, 0, -1;
  CHECK_THROWS_AS(spd_sqrt(neg), DomainError);
}

TEST_CASE("interpolation pair for a 2-chain has the known polynomial form") {
  // Derived by hand from the minimum-energy interpolation formula.
  const auto at = [](double t) {
    const double d = 1.0 - t;
    Matrix P(2, 2), Q(2, 2);
    P << 3 * d * d - 2 * d * d * d, d * d - d * d * d,
        6 * d * d - 6 * d, 3 * d * d - 2 * d;
    Q << 3 * t * t - 2 * t * t * t, t * t * t - t * t,
        6 * t - 6 * t * t, 3 * t * t - 2 * t;
    return std::pair<Matrix, Matrix>{P, Q};
  };
  for (double t : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) {
    const auto got = interp_matrices(2, t);
    const auto [P, Q] = at(t);
    CHECK((got.P - P).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((got.Q - Q).cwiseAbs().maxCoeff() < 1e-13);
  }
  const auto mid = interp_matrices(2, 0.5);
  CHECK(mid.P(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(mid.P(0, 1) == doctest::Approx(0.125).epsilon(1e-14));
  CHECK(mid.P(1, 0) == doctest::Approx(-1.5).epsilon(1e-14));
  CHECK(mid.P(1, 1) == doctest::Approx(-0.25).epsilon(1e-14));
  CHECK(mid.Q(0, 1) == doctest::Approx(-0.125).epsilon(1e-14));
}

TEST_CASE("interpolation pair reproduces endpoints and the transition identity") {
  for (int n = 1; n <= 8; ++n) {
    const Matrix phi10 = state_transition(n, 1.0, 0.0);
    const auto a = interp_matrices(n, 0.0);
    CHECK((a.P - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(a.Q.cwiseAbs().maxCoeff() < 1e-12);
    const auto b = interp_matrices(n, 1.0);
    CHECK(b.P.cwiseAbs().maxCoeff() < 1e-12);
    CHECK((b.Q - Matrix::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-12);
    // The Gramian solve behind P and Q is conditioning-limited; the identity
    // degrades past n = 5 (~1e2 per added dimension) even with extended
    // internals.
    const double tol = n <= 6 ? 1e-10 : (n == 7 ? 1e-8 : 1e-6);
    for (double t : {0.1, 0.3, 0.5, 0.7, 0.9}) {
      const auto m = interp_matrices(n, t);
      const Matrix lhs = m.P + m.Q * phi10;
      const Matrix rhs = state_transition(n, t, 0.0);
      CHECK((lhs - rhs).cwiseAbs().maxCoeff() < tol);
    }
  }
}
