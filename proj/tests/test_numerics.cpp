#include "mlaforge/numerics.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace mlaforge;

TEST_CASE("svd of identity has unit singular values") {
  const SvdResult r = svd(Matrix::Identity(3, 3));
  for (int i = 0; i < 3; ++i) CHECK(r.sigma(i) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("svd of a diagonal matrix returns the diagonal, sorted") {
  Matrix a = Matrix::Zero(3, 3);
  a(0, 0) = 3;
  a(1, 1) = 2;
  a(2, 2) = 1;
  const SvdResult r = svd(a);
  CHECK(r.sigma(0) == doctest::Approx(3.0));
  CHECK(r.sigma(1) == doctest::Approx(2.0));
  CHECK(r.sigma(2) == doctest::Approx(1.0));
}

TEST_CASE("svd singular values match the Jacobi eigensolver oracle") {
  std::mt19937_64 rng(7);
  const Matrix a = oracle::random_matrix(8, 5, rng);
  const SvdResult r = svd(a);
  const std::vector<double> expect = oracle::jacobi_singular_values(a);
  REQUIRE(r.sigma.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(std::abs(r.sigma(i) - expect[i]) <= 1e-8);
}

TEST_CASE("svd reconstruction and orthonormality on random matrices") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> size(1, 64);
    const int m = size(rng), n = size(rng);
    const Matrix a = oracle::random_matrix(m, n, rng);
    const SvdResult r = svd(a);
    const Matrix rec = r.u * r.sigma.asDiagonal() * r.vt;
    CHECK((a - rec).norm() <= 1e-8 * std::max(1e-30, a.norm()));
    const int k = static_cast<int>(r.sigma.size());
    CHECK((r.u.transpose() * r.u - Matrix::Identity(k, k)).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((r.vt * r.vt.transpose() - Matrix::Identity(k, k)).cwiseAbs().maxCoeff() <= 1e-10);
    for (int i = 0; i + 1 < k; ++i) CHECK(r.sigma(i) >= r.sigma(i + 1));
  }
}

TEST_CASE("svd sign convention is reproducible bit for bit") {
  std::mt19937_64 rng(13);
  const Matrix a = oracle::random_matrix(9, 6, rng);
  const SvdResult r1 = svd(a);
  const SvdResult r2 = svd(a);
  CHECK(r1.u == r2.u);
  CHECK(r1.vt == r2.vt);
  // Largest-magnitude entry of each left singular vector is nonnegative.
  for (int j = 0; j < r1.u.cols(); ++j) {
    int pivot = 0;
    for (int i = 0; i < r1.u.rows(); ++i)
      if (std::abs(r1.u(i, j)) > std::abs(r1.u(pivot, j))) pivot = i;
    CHECK(r1.u(pivot, j) >= 0.0);
  }
}

TEST_CASE("svd rejects non-finite input") {
  Matrix a = Matrix::Zero(2, 2);
  a(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(svd(a), std::invalid_argument);
}

TEST_CASE("eig_sym_psd clamps small negative eigenvalues") {
  std::mt19937_64 rng(17);
  const Matrix x = oracle::random_matrix(6, 3, rng);  // rank 3 covariance
  const Matrix s = x * x.transpose();
  const SymEigResult r = eig_sym_psd(s);
  for (int i = 0; i < r.lambda.size(); ++i) CHECK(r.lambda(i) >= 0.0);
  const Matrix rec = r.u * r.lambda.asDiagonal() * r.u.transpose();
  CHECK((s - rec).norm() <= 1e-9 * s.norm());
}

TEST_CASE("pseudo_inverse inverts full-rank and ignores null space") {
  std::mt19937_64 rng(19);
  const Matrix a = oracle::random_matrix(5, 3, rng);
  const Matrix p = pseudo_inverse(a);
  CHECK((p * a - Matrix::Identity(3, 3)).norm() <= 1e-9);
}

TEST_CASE("kl divergence basics") {
  Vector half(2);
  half << 0.5, 0.5;
  CHECK(kl_divergence(half, half) == doctest::Approx(0.0));

  Vector p(2), q(2);
  p << 1.0, 0.0;
  q << 0.5, 0.5;
  CHECK(kl_divergence(p, q) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

  p << 0.9, 0.1;
  q << 0.1, 0.9;
  const double expect = 0.9 * std::log(9.0) + 0.1 * std::log(1.0 / 9.0);
  CHECK(kl_divergence(p, q) == doctest::Approx(expect).epsilon(1e-9));
  CHECK(kl_divergence(p, q) == doctest::Approx(1.7578).epsilon(1e-3));
}

TEST_CASE("kl divergence error paths") {
  Vector p(2), q(3);
  p << 0.5, 0.5;
  q << 0.3, 0.3, 0.4;
  CHECK_THROWS_AS(kl_divergence(p, q), std::invalid_argument);
  Vector neg(2);
  neg << 1.5, -0.5;
  CHECK_THROWS_AS(kl_divergence(p, neg), std::invalid_argument);
  Vector not_normalized(2);
  not_normalized << 0.7, 0.7;
  CHECK_THROWS_AS(kl_divergence(p, not_normalized), std::invalid_argument);
}

TEST_CASE("kl divergence nonneg and zero only at equality on random simplex pairs") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(uni(rng) * 6);
    Vector p(n), q(n);
    for (int i = 0; i < n; ++i) {
      p(i) = uni(rng) + 1e-6;
      q(i) = uni(rng) + 1e-6;
    }
    p /= p.sum();
    q /= q.sum();
    CHECK(kl_divergence(p, q) >= 0.0);
    CHECK(kl_divergence(p, p) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows") {
  Matrix s(1, 2);
  s << 0.0, 0.0;
  Matrix p = softmax_rows(s, false);
  CHECK(p(0, 0) == doctest::Approx(0.5));
  CHECK(p(0, 1) == doctest::Approx(0.5));

  s << std::log(2.0), 0.0;
  p = softmax_rows(s, false);
  CHECK(p(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(p(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  std::mt19937_64 rng(29);
  const Matrix scores = oracle::random_matrix(3, 3, rng);
  const Matrix causal = softmax_rows(scores, true);
  CHECK(causal(0, 0) == doctest::Approx(1.0));
  CHECK(causal(0, 1) == 0.0);
  CHECK(causal(0, 2) == 0.0);
  for (int i = 0; i < 3; ++i) CHECK(causal.row(i).sum() == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("softmax survives large scores") {
  Matrix s(1, 2);
  s << 1e8, 1e8 - 1.0;
  const Matrix p = softmax_rows(s, false);
  CHECK(p.row(0).sum() == doctest::Approx(1.0));
  CHECK(p(0, 0) > p(0, 1));
}
