#include "mlaforge/rope.hpp"

#include <cmath>

namespace mlaforge {

double RopeSpec::theta(int k) const {
  if (k < 0 || k >= n_subspaces()) throw std::out_of_range("RopeSpec::theta: subspace index");
  return std::exp(-2.0 * k * std::log(base) / d_head);
}

MropeGroup RopeSpec::group_of_subspace(int k) const {
  if (k < 0 || k >= n_subspaces())
    throw std::out_of_range("RopeSpec::group_of_subspace: subspace index");
  if (d_head % 16 != 0)
    throw std::invalid_argument("mrope requires d_head divisible by 16");
  if (k < d_head / 8) return MropeGroup::temporal;
  if (k < 5 * d_head / 16) return MropeGroup::height;
  return MropeGroup::width;
}

double RopeSpec::angle(int k, const Pos3& p) const {
  std::int64_t pos = p.t;
  if (kind == RopeKind::mrope) {
    switch (group_of_subspace(k)) {
      case MropeGroup::temporal: pos = p.t; break;
      case MropeGroup::height: pos = p.h; break;
      case MropeGroup::width: pos = p.w; break;
    }
  }
  return static_cast<double>(pos) * theta(k);
}

int SegmentSpec::n_tokens() const {
  switch (kind) {
    case Kind::text: return n_text;
    case Kind::image: return rows * cols;
    case Kind::video: return frames * rows * cols;
  }
  return 0;
}

std::vector<Pos3> assign_positions(const std::vector<SegmentSpec>& layout) {
  std::vector<Pos3> out;
  std::int64_t next = 0;  // running index; IDs never collide across segments
  for (const auto& seg : layout) {
    switch (seg.kind) {
      case SegmentSpec::Kind::text:
        if (seg.n_text < 0) throw std::invalid_argument("assign_positions: negative text length");
        for (int i = 0; i < seg.n_text; ++i) {
          out.push_back({next, next, next});
          ++next;
        }
        break;
      case SegmentSpec::Kind::image:
      case SegmentSpec::Kind::video: {
        if (seg.rows <= 0 || seg.cols <= 0)
          throw std::invalid_argument("assign_positions: empty grid");
        const int frames = seg.kind == SegmentSpec::Kind::image ? 1 : seg.frames;
        if (frames <= 0) throw std::invalid_argument("assign_positions: empty video");
        const std::int64_t t0 = next;
        for (int f = 0; f < frames; ++f)
          for (int r = 0; r < seg.rows; ++r)
            for (int c = 0; c < seg.cols; ++c)
              out.push_back({t0 + f, r, c});
        next = std::max({t0 + frames, static_cast<std::int64_t>(seg.rows),
                         static_cast<std::int64_t>(seg.cols)});
        break;
      }
    }
  }
  return out;
}

Vector apply_rope(const RopeSpec& spec, const Vector& vec, const Pos3& pos,
                  const SubspaceSet& retained) {
  if (vec.size() != spec.d_head) throw std::invalid_argument("apply_rope: vector length");
  Vector out = vec;
  auto rotate = [&](int k) {
    if (k < 0 || k >= spec.n_subspaces())
      throw std::out_of_range("apply_rope: retained index out of range");
    const double a = spec.angle(k, pos);
    const double c = std::cos(a), s = std::sin(a);
    const double x = vec(2 * k), y = vec(2 * k + 1);
    out(2 * k) = c * x - s * y;
    out(2 * k + 1) = s * x + c * y;
  };
  if (retained.all) {
    for (int k = 0; k < spec.n_subspaces(); ++k) rotate(k);
  } else {
    for (int k : retained.indices) rotate(k);
  }
  return out;
}

double relative_score(const RopeSpec& spec, const Vector& q, const Vector& k,
                      const Pos3& pos_q, const Pos3& pos_k, const SubspaceSet& retained) {
  return apply_rope(spec, q, pos_q, retained).dot(apply_rope(spec, k, pos_k, retained));
}

}  // namespace mlaforge
