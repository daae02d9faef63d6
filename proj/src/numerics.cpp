#include "mlaforge/numerics.hpp"

#include <cmath>
#include <limits>

namespace mlaforge {

namespace {

// Flip column signs of u (and the matching rows of vt) so the
// largest-magnitude entry of each u column is nonnegative.
void canonicalize_signs(Matrix& u, Matrix* vt) {
  for (Eigen::Index j = 0; j < u.cols(); ++j) {
    Eigen::Index pivot = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double mag = std::abs(u(i, j));
      if (mag > best) {
        best = mag;
        pivot = i;
      }
    }
    if (u(pivot, j) < 0.0) {
      u.col(j) = -u.col(j);
      if (vt != nullptr && j < vt->rows()) vt->row(j) = -vt->row(j);
    }
  }
}

void require_finite(const Matrix& a, const char* what) {
  if (!a.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

}  // namespace

SvdResult svd(const Matrix& a) {
  require_finite(a, "svd");
  Eigen::JacobiSVD<Matrix> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (dec.info() != Eigen::Success) throw std::runtime_error("svd: did not converge");
  SvdResult r;
  r.u = dec.matrixU();
  r.sigma = dec.singularValues();
  r.vt = dec.matrixV().transpose();
  canonicalize_signs(r.u, &r.vt);
  return r;
}

SymEigResult eig_sym_psd(const Matrix& s) {
  require_finite(s, "eig_sym_psd");
  if (s.rows() != s.cols()) throw std::invalid_argument("eig_sym_psd: matrix not square");
  Eigen::SelfAdjointEigenSolver<Matrix> dec(s);
  if (dec.info() != Eigen::Success) throw std::runtime_error("eig_sym_psd: did not converge");
  const Eigen::Index n = s.rows();
  SymEigResult r;
  r.u.resize(n, n);
  r.lambda.resize(n);
  // Eigen returns ascending order; emit descending with negatives clamped.
  for (Eigen::Index i = 0; i < n; ++i) {
    r.u.col(i) = dec.eigenvectors().col(n - 1 - i);
    r.lambda(i) = std::max(0.0, dec.eigenvalues()(n - 1 - i));
  }
  canonicalize_signs(r.u, nullptr);
  return r;
}

Matrix pseudo_inverse(const Matrix& a, double tol) {
  const SvdResult f = svd(a);
  const double cutoff = tol * std::max<double>(1, f.sigma.size() > 0 ? f.sigma(0) : 0.0);
  Vector inv = Vector::Zero(f.sigma.size());
  for (Eigen::Index i = 0; i < f.sigma.size(); ++i)
    if (f.sigma(i) > cutoff) inv(i) = 1.0 / f.sigma(i);
  return f.vt.transpose() * inv.asDiagonal() * f.u.transpose();
}

Matrix softmax_rows(const Matrix& scores, bool causal) {
  require_finite(scores, "softmax_rows");
  if (causal && scores.rows() != scores.cols())
    throw std::invalid_argument("softmax_rows: causal mask requires square scores");
  Matrix out = Matrix::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    const Eigen::Index last = causal ? i : scores.cols() - 1;
    if (last < 0) throw std::invalid_argument("softmax_rows: fully masked row");
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= last; ++j) mx = std::max(mx, scores(i, j));
    double denom = 0.0;
    for (Eigen::Index j = 0; j <= last; ++j) denom += std::exp(scores(i, j) - mx);
    for (Eigen::Index j = 0; j <= last; ++j) out(i, j) = std::exp(scores(i, j) - mx) / denom;
  }
  return out;
}

double kl_divergence(const Vector& p, const Vector& q) {
  if (p.size() != q.size()) throw std::invalid_argument("kl_divergence: length mismatch");
  if ((p.array() < 0.0).any() || (q.array() < 0.0).any())
    throw std::invalid_argument("kl_divergence: negative entry");
  if (std::abs(p.sum() - 1.0) > 1e-9 || std::abs(q.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("kl_divergence: inputs must sum to 1");
  // Floor-and-renormalize only when underflow actually occurred, so that
  // p == q elementwise yields an exact zero.
  Vector qf = q;
  if ((q.array() < 1e-12).any()) {
    qf = q.array().max(1e-12);
    qf /= qf.sum();
  }
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (p(i) > 0.0) kl += p(i) * std::log(p(i) / qf(i));
  return std::max(0.0, kl);
}

}  // namespace mlaforge
