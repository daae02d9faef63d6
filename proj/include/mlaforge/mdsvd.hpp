#pragma once

#include "mlaforge/numerics.hpp"

#include <optional>
#include <vector>

namespace mlaforge {

/// Outcome of one activation-whitened low-rank factorization.
/// w * x is approximated by w_up * (w_down * x); loss_sq is the squared
/// Frobenius truncation error on the calibration activations.
struct FactorizationResult {
  Matrix w_up;    // rows(w) x rank
  Matrix w_down;  // rank x cols(w)
  int rank = 0;
  double loss_sq = 0.0;             // direct ||w x - w_up w_down x||_F^2
  double loss_sq_closed_form = 0.0; // sum of squared discarded singular values of D
  Vector discarded_spectrum;        // singular values of D beyond rank
  bool single_modality_fallback = false;
};

struct LossReportEntry {
  int layer = 0;
  double loss_joint = 0.0;
  double loss_visual = 0.0;
  double loss_text = 0.0;
  double ratio = 1.0;  // (loss_visual + loss_text) / loss_joint, <= 1 + 1e-9
};

/// Whitened truncated factorization: S = x x^T (+ ridge * trace(S)/d * I),
/// D = w U_s S^{1/2}, SVD(D) truncated to `rank`, w_up = U_d S_d^{1/2},
/// w_down = S_d^{1/2} V_d^T S_s^{-1/2} U_s^T.
FactorizationResult whitened_factorize(const Matrix& w, const Matrix& x, int rank,
                                       double ridge = 1e-6);

struct MdSvdResult {
  FactorizationResult visual;
  FactorizationResult text;
};

/// Per-modality factorization of the shared weight; the input w itself is
/// never modified. An empty modality falls back to the other's factors with
/// the fallback flag set; both empty is an error.
MdSvdResult md_svd(const Matrix& w, const Matrix& x_visual, const Matrix& x_text, int r_visual,
                   int r_text, double ridge = 1e-6);

/// Joint-vs-split truncation-loss comparison at one rank.
LossReportEntry theorem1_report(const Matrix& w, const Matrix& x_visual, const Matrix& x_text,
                                int rank, double ridge = 1e-6);

}  // namespace mlaforge
