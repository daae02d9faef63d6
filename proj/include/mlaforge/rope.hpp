#pragma once

#include "mlaforge/numerics.hpp"

#include <cstdint>
#include <vector>

namespace mlaforge {

enum class RopeKind { vanilla_1d, mrope };

/// (t, h, w) position triple; text tokens carry t == h == w.
struct Pos3 {
  std::int64_t t = 0;
  std::int64_t h = 0;
  std::int64_t w = 0;
  bool operator==(const Pos3&) const = default;
};

enum class MropeGroup { temporal, height, width };

struct RopeSpec {
  RopeKind kind = RopeKind::vanilla_1d;
  double base = 10000.0;
  int d_head = 0;

  int n_subspaces() const { return d_head / 2; }
  /// theta_k = base^(-2k/d_head), evaluated as exp(-2k ln(base) / d_head).
  double theta(int k) const;
  /// M-RoPE component boundaries in subspace index:
  /// temporal [0, d_h/8), height [d_h/8, 5d_h/16), width [5d_h/16, d_h/2).
  MropeGroup group_of_subspace(int k) const;
  /// Rotation angle of subspace k at position p.
  double angle(int k, const Pos3& p) const;
};

/// Sentinel-free "which subspaces keep rotary encoding" set.
struct SubspaceSet {
  bool all = true;
  std::vector<int> indices;  // ignored when all

  static SubspaceSet everything() { return SubspaceSet{}; }
  static SubspaceSet of(std::vector<int> idx) { return SubspaceSet{false, std::move(idx)}; }
  static SubspaceSet none() { return SubspaceSet{false, {}}; }
};

/// Declarative calibration-sequence layout used by assign_positions.
struct SegmentSpec {
  enum class Kind { text, image, video } kind = Kind::text;
  int n_text = 0;             // text
  int rows = 0, cols = 0;     // image / video grid
  int frames = 0;             // video

  static SegmentSpec text(int n) { return {Kind::text, n, 0, 0, 0}; }
  static SegmentSpec image(int rows, int cols) { return {Kind::image, 0, rows, cols, 0}; }
  static SegmentSpec video(int frames, int rows, int cols) {
    return {Kind::video, 0, rows, cols, frames};
  }
  int n_tokens() const;
};

/// Position-ID assignment: text tokens get t = h = w = running index, image
/// tokens share one t with 0-based (h, w) from the grid, video frames advance
/// t per frame. The running index then jumps past every ID the segment used.
std::vector<Pos3> assign_positions(const std::vector<SegmentSpec>& layout);

/// Rotate the retained 2-D subspaces [2k, 2k+1] of a head vector in place of
/// nothing: non-retained subspaces pass through unrotated (NoPE).
Vector apply_rope(const RopeSpec& spec, const Vector& vec, const Pos3& pos,
                  const SubspaceSet& retained);

/// dot(apply_rope(q, pos_q), apply_rope(k, pos_k)); depends only on the
/// componentwise position difference.
double relative_score(const RopeSpec& spec, const Vector& q, const Vector& k,
                      const Pos3& pos_q, const Pos3& pos_k, const SubspaceSet& retained);

}  // namespace mlaforge
