#include "mlaforge/mdsvd.hpp"

#include <cmath>

namespace mlaforge {

namespace {

// Covariance accumulated in fixed column-chunk order for reproducibility.
Matrix covariance(const Matrix& x) {
  const Eigen::Index d = x.rows();
  Matrix s = Matrix::Zero(d, d);
  constexpr Eigen::Index kChunk = 64;
  for (Eigen::Index c0 = 0; c0 < x.cols(); c0 += kChunk) {
    const Eigen::Index nc = std::min(kChunk, x.cols() - c0);
    const auto chunk = x.middleCols(c0, nc);
    s += chunk * chunk.transpose();
  }
  return s;
}

}  // namespace

FactorizationResult whitened_factorize(const Matrix& w, const Matrix& x, int rank, double ridge) {
  if (rank <= 0) throw std::invalid_argument("whitened_factorize: rank must be positive");
  if (x.cols() == 0) throw std::invalid_argument("whitened_factorize: empty activations");
  if (w.cols() != x.rows())
    throw std::invalid_argument("whitened_factorize: w/x dimension mismatch");
  const Eigen::Index d = x.rows();
  if (rank > std::min<Eigen::Index>(w.rows(), d))
    throw std::invalid_argument("whitened_factorize: rank exceeds min(rows(w), d_model)");

  Matrix s = covariance(x);
  const double tr = s.trace();
  if (ridge > 0.0 && tr > 0.0)
    s += (ridge * tr / static_cast<double>(d)) * Matrix::Identity(d, d);

  const SymEigResult es = eig_sym_psd(s);
  const Vector sqrt_l = es.lambda.array().sqrt();
  // Pseudo-inverse of S^{1/2}: zero eigenvalues (rank-deficient calibration
  // with ridge disabled) invert to zero.
  const double cutoff = (sqrt_l.size() > 0 ? sqrt_l(0) : 0.0) * 1e-14;
  Vector inv_sqrt_l = Vector::Zero(d);
  for (Eigen::Index i = 0; i < d; ++i)
    if (sqrt_l(i) > cutoff) inv_sqrt_l(i) = 1.0 / sqrt_l(i);

  const Matrix dmat = w * es.u * sqrt_l.asDiagonal();
  const SvdResult f = svd(dmat);

  FactorizationResult res;
  res.rank = rank;
  const Vector sd_sqrt = f.sigma.head(rank).array().sqrt();
  res.w_up = f.u.leftCols(rank) * sd_sqrt.asDiagonal();
  res.w_down =
      sd_sqrt.asDiagonal() * f.vt.topRows(rank) * inv_sqrt_l.asDiagonal() * es.u.transpose();
  res.discarded_spectrum = f.sigma.tail(f.sigma.size() - rank);
  res.loss_sq_closed_form = res.discarded_spectrum.squaredNorm();
  res.loss_sq = (w * x - res.w_up * (res.w_down * x)).squaredNorm();
  return res;
}

MdSvdResult md_svd(const Matrix& w, const Matrix& x_visual, const Matrix& x_text, int r_visual,
                   int r_text, double ridge) {
  const bool have_visual = x_visual.cols() > 0;
  const bool have_text = x_text.cols() > 0;
  if (!have_visual && !have_text)
    throw std::invalid_argument("md_svd: both modalities empty");

  MdSvdResult res;
  if (have_visual && have_text) {
    res.visual = whitened_factorize(w, x_visual, r_visual, ridge);
    res.text = whitened_factorize(w, x_text, r_text, ridge);
  } else if (have_visual) {
    res.visual = whitened_factorize(w, x_visual, r_visual, ridge);
    res.text = res.visual;
    res.text.single_modality_fallback = true;
  } else {
    res.text = whitened_factorize(w, x_text, r_text, ridge);
    res.visual = res.text;
    res.visual.single_modality_fallback = true;
  }
  return res;
}

LossReportEntry theorem1_report(const Matrix& w, const Matrix& x_visual, const Matrix& x_text,
                                int rank, double ridge) {
  Matrix joint(x_visual.rows(), x_visual.cols() + x_text.cols());
  joint << x_visual, x_text;

  LossReportEntry e;
  e.loss_joint = whitened_factorize(w, joint, rank, ridge).loss_sq;
  const MdSvdResult split = md_svd(w, x_visual, x_text, rank, rank, ridge);
  e.loss_visual = split.visual.loss_sq;
  e.loss_text = split.text.loss_sq;

  const double reference = (w * joint).squaredNorm();
  if (e.loss_joint <= reference * 1e-14) {
    e.ratio = 1.0;  // both losses vanish at (near) full rank
  } else {
    e.ratio = (e.loss_visual + e.loss_text) / e.loss_joint;
  }
  if (e.ratio > 1.0 + 1e-9)
    throw std::runtime_error("theorem1_report: split loss exceeded joint loss");
  return e;
}

}  // namespace mlaforge
