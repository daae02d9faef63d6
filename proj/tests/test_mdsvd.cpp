#include "mlaforge/mdsvd.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <Eigen/Dense>
#include <random>

using namespace mlaforge;

namespace {

/// Brute-force evaluation of the truncation loss on the calibration set.
double direct_loss(const Matrix& w, const Matrix& x, const FactorizationResult& f) {
  return (w * x - f.w_up * (f.w_down * x)).squaredNorm();
}

/// Plain (unwhitened) truncated SVD of w, as the baseline the whitened
/// factorization must never lose to.
double unwhitened_loss(const Matrix& w, const Matrix& x, int rank) {
  Eigen::JacobiSVD<Matrix> f(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Matrix approx = f.matrixU().leftCols(rank) *
                        f.singularValues().head(rank).asDiagonal() *
                        f.matrixV().leftCols(rank).transpose();
  return (w * x - approx * x).squaredNorm();
}

}  // namespace

TEST_CASE("full rank with near-zero ridge reconstructs w x") {
  std::mt19937_64 rng(1);
  const Matrix w = oracle::random_matrix(8, 6, rng);
  const Matrix x = oracle::random_matrix(6, 20, rng);
  const FactorizationResult f = whitened_factorize(w, x, 6, 0.0);
  CHECK((f.w_up * (f.w_down * x) - w * x).norm() <= 1e-6 * (w * x).norm());
  CHECK(f.loss_sq <= 1e-12 * (w * x).squaredNorm());
}

TEST_CASE("orthonormal activations reduce to the plain truncated svd of w") {
  std::mt19937_64 rng(2);
  const Matrix w = oracle::random_matrix(10, 6, rng);
  // x with orthonormal rows spanning R^6: S = x x^T = I, whitening is a no-op.
  const Matrix g = oracle::random_matrix(6, 6, rng);
  const Eigen::HouseholderQR<Matrix> qr(g);
  const Matrix x = qr.householderQ() * Matrix::Identity(6, 6);
  const int rank = 3;
  const FactorizationResult f = whitened_factorize(w, x, rank, 0.0);

  Eigen::JacobiSVD<Matrix> sw(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  double expect = 0.0;
  for (int i = rank; i < sw.singularValues().size(); ++i)
    expect += sw.singularValues()(i) * sw.singularValues()(i);
  CHECK(f.loss_sq == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("closed-form loss matches the direct evaluation and beats unwhitened svd") {
  std::mt19937_64 rng(3);
  const Matrix w = oracle::random_matrix(12, 8, rng);
  const Matrix x = oracle::random_matrix(8, 40, rng);
  const FactorizationResult f = whitened_factorize(w, x, 4, 0.0);
  CHECK(f.loss_sq == doctest::Approx(f.loss_sq_closed_form).epsilon(1e-6));
  CHECK(f.loss_sq == doctest::Approx(direct_loss(w, x, f)).epsilon(1e-9));
  CHECK(f.loss_sq <= unwhitened_loss(w, x, 4) * (1.0 + 1e-9));
}

TEST_CASE("factorization matches a line-by-line transcript of the whitening recipe") {
  // Independent step-by-step execution on a 6x4 weight with 4x10 activations,
  // rank 2, using Eigen's own solvers rather than the library wrappers.
  std::mt19937_64 rng(4);
  const Matrix w = oracle::random_matrix(6, 4, rng);
  const Matrix x = oracle::random_matrix(4, 10, rng);
  const int rank = 2;

  const Matrix s = x * x.transpose();                       // S  <- X X^T
  Eigen::SelfAdjointEigenSolver<Matrix> es(s);              // U_s, Sigma_s
  Matrix u_s(4, 4);
  Vector lam(4);
  for (int i = 0; i < 4; ++i) {                             // descending order
    lam(i) = es.eigenvalues()(3 - i);
    u_s.col(i) = es.eigenvectors().col(3 - i);
  }
  const Vector sqrt_lam = lam.array().sqrt();
  const Matrix d = w * u_s * sqrt_lam.asDiagonal();         // D <- W U_s Sigma_s^{1/2}
  Eigen::JacobiSVD<Matrix> sd(d, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector sd_sqrt = sd.singularValues().head(rank).array().sqrt();
  const Matrix w_up = sd.matrixU().leftCols(rank) * sd_sqrt.asDiagonal();
  const Matrix w_down = sd_sqrt.asDiagonal() * sd.matrixV().leftCols(rank).transpose() *
                        sqrt_lam.cwiseInverse().asDiagonal() * u_s.transpose();

  const FactorizationResult f = whitened_factorize(w, x, rank, 0.0);
  // Compare through sign-invariant quantities: the composed map, the applied
  // reconstruction, the spectrum, and the loss.
  CHECK((f.w_up * f.w_down - w_up * w_down).cwiseAbs().maxCoeff() <= 1e-8);
  CHECK((f.w_up * (f.w_down * x) - w_up * (w_down * x)).cwiseAbs().maxCoeff() <= 1e-8);
  REQUIRE(f.discarded_spectrum.size() == 2);
  for (int i = 0; i < 2; ++i)
    CHECK(f.discarded_spectrum(i) ==
          doctest::Approx(sd.singularValues()(rank + i)).epsilon(1e-8));
  const double transcript_loss = (w * x - w_up * (w_down * x)).squaredNorm();
  CHECK(f.loss_sq == doctest::Approx(transcript_loss).epsilon(1e-8));
}

TEST_CASE("identical modalities give identical factor pairs and ratio one") {
  std::mt19937_64 rng(5);
  const Matrix w = oracle::random_matrix(8, 6, rng);
  const Matrix x = oracle::random_matrix(6, 24, rng);
  const MdSvdResult r = md_svd(w, x, x, 3, 3);
  CHECK(r.visual.w_up == r.text.w_up);
  CHECK(r.visual.w_down == r.text.w_down);
  CHECK_FALSE(r.visual.single_modality_fallback);
  const LossReportEntry e = theorem1_report(w, x, x, 3);
  CHECK(e.ratio == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("md_svd never modifies the shared weight") {
  std::mt19937_64 rng(6);
  const Matrix w = oracle::random_matrix(8, 6, rng);
  const Matrix w_copy = w;
  md_svd(w, oracle::random_matrix(6, 10, rng), oracle::random_matrix(6, 10, rng), 3, 3);
  CHECK(w == w_copy);
}

TEST_CASE("heterogeneous modalities push the split/joint ratio well below one") {
  std::mt19937_64 rng(7);
  const int d = 8, rank = 3;
  // Orthogonal dominant subspaces: visual lives in the first half of an
  // orthogonal basis, text in the second half, both with small shared noise.
  const Eigen::HouseholderQR<Matrix> qr(oracle::random_matrix(d, d, rng));
  const Matrix basis = qr.householderQ() * Matrix::Identity(d, d);
  const Matrix w = oracle::random_matrix(10, d, rng);
  Matrix xv = basis.leftCols(d / 2) * oracle::random_matrix(d / 2, 40, rng) * 10.0 +
              oracle::random_matrix(d, 40, rng) * 0.01;
  Matrix xt = basis.rightCols(d / 2) * oracle::random_matrix(d / 2, 40, rng) * 10.0 +
              oracle::random_matrix(d, 40, rng) * 0.01;
  const LossReportEntry e = theorem1_report(w, xv, xt, rank);
  CHECK(e.ratio <= 1.0 + 1e-9);
  CHECK(e.ratio < 0.9);
}

TEST_CASE("split losses beat the joint factorization under modality imbalance") {
  std::mt19937_64 rng(8);
  int wins = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix w = oracle::random_matrix(10, 6, rng);
    const Matrix xv = oracle::random_matrix(6, 30, rng) * 100.0;
    const Matrix xt = oracle::random_matrix(6, 30, rng);
    const int rank = 3;
    Matrix joint(6, 60);
    joint << xv, xt;
    const FactorizationResult fj = whitened_factorize(w, joint, rank);
    const MdSvdResult split = md_svd(w, xv, xt, rank, rank);
    const double joint_on_modalities = direct_loss(w, xv, fj) + direct_loss(w, xt, fj);
    if (split.visual.loss_sq + split.text.loss_sq < joint_on_modalities) ++wins;
  }
  CHECK(wins >= 95);
}

TEST_CASE("theorem 1 ratio never exceeds one on random instances") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<int> dim(3, 10);
    const int d = dim(rng);
    const Matrix w = oracle::random_matrix(dim(rng) + 2, d, rng);
    const Matrix xv = oracle::random_matrix(d, 20, rng);
    const Matrix xt = oracle::random_matrix(d, 20, rng);
    const int rank = 1 + trial % std::min<int>(d, static_cast<int>(w.rows()));
    const LossReportEntry e = theorem1_report(w, xv, xt, rank);
    CHECK(e.ratio <= 1.0 + 1e-9);
  }
}

TEST_CASE("loss is nonincreasing in rank") {
  std::mt19937_64 rng(10);
  const Matrix w = oracle::random_matrix(9, 7, rng);
  const Matrix x = oracle::random_matrix(7, 30, rng);
  double prev = std::numeric_limits<double>::infinity();
  for (int rank = 1; rank <= 7; ++rank) {
    const double loss = whitened_factorize(w, x, rank).loss_sq;
    CHECK(loss <= prev + 1e-12);
    prev = loss;
  }
}

TEST_CASE("degenerate inputs are rejected or flagged") {
  std::mt19937_64 rng(11);
  const Matrix w = oracle::random_matrix(6, 4, rng);
  const Matrix x = oracle::random_matrix(4, 8, rng);
  const Matrix empty(4, 0);
  CHECK_THROWS_AS(whitened_factorize(w, x, 0), std::invalid_argument);
  CHECK_THROWS_AS(whitened_factorize(w, empty, 2), std::invalid_argument);
  CHECK_THROWS_AS(whitened_factorize(w, x, 5), std::invalid_argument);
  CHECK_THROWS_AS(md_svd(w, empty, empty, 2, 2), std::invalid_argument);

  const MdSvdResult only_text = md_svd(w, empty, x, 2, 2);
  CHECK(only_text.visual.single_modality_fallback);
  CHECK_FALSE(only_text.text.single_modality_fallback);
  CHECK(only_text.visual.w_up == only_text.text.w_up);
}
