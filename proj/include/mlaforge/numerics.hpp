#pragma once

#include <Eigen/Dense>

#include <stdexcept>

namespace mlaforge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Thin SVD a = u * sigma.asDiagonal() * vt with sigma sorted descending.
/// Sign convention: in each left singular vector the entry of largest
/// magnitude is nonnegative (ties broken by lowest row index), so repeated
/// factorization of the same matrix is bit-identical.
struct SvdResult {
  Matrix u;      // m x k
  Vector sigma;  // k, nonnegative, descending
  Matrix vt;     // k x n
};

struct SymEigResult {
  Matrix u;       // orthogonal, columns are eigenvectors
  Vector lambda;  // descending, clamped to >= 0
};

SvdResult svd(const Matrix& a);

/// Symmetric PSD eigendecomposition; negative eigenvalues (roundoff from
/// covariance accumulation) are clamped to zero. Same sign convention as svd.
SymEigResult eig_sym_psd(const Matrix& s);

Matrix pseudo_inverse(const Matrix& a, double tol = 1e-12);

inline double frobenius_norm(const Matrix& a) { return a.norm(); }

/// Row-wise softmax with row-max subtraction. With `causal` set, entry (i, j)
/// for j > i is masked out (weight 0); requires a square score matrix.
Matrix softmax_rows(const Matrix& scores, bool causal);

/// KL(p || q) = sum_i p_i ln(p_i / q_i). q is floored at 1e-12 and
/// renormalized before evaluation; masked attention rows can underflow.
double kl_divergence(const Vector& p, const Vector& q);

}  // namespace mlaforge
