#include "mlaforge/model.hpp"

#include <cmath>

namespace mlaforge {

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || n_kv_heads <= 0 || d_model <= 0 || d_head <= 0)
    throw std::invalid_argument("ModelConfig: counts and dims must be positive");
  if (n_heads % n_kv_heads != 0)
    throw std::invalid_argument("ModelConfig: n_heads must be divisible by n_kv_heads");
  if (d_head % 2 != 0) throw std::invalid_argument("ModelConfig: d_head must be even");
  if (d_rope <= 0 || d_rope > d_head || d_rope % 2 != 0)
    throw std::invalid_argument("ModelConfig: d_rope must be even and in (0, d_head]");
  if (d_latent <= 0 || d_latent > 2 * d_head - d_rope)
    throw std::invalid_argument("ModelConfig: d_latent must be in (0, 2*d_head - d_rope]");
  if (rope_kind == RopeKind::mrope && d_head % 16 != 0)
    throw std::invalid_argument("ModelConfig: mrope requires d_head divisible by 16");
}

void TokenSequence::validate(int d_model) const {
  if (embeddings.rows() != d_model) throw std::invalid_argument("TokenSequence: d_model mismatch");
  const auto n = static_cast<std::size_t>(embeddings.cols());
  if (modality.size() != n || positions.size() != n)
    throw std::invalid_argument("TokenSequence: per-token arrays disagree with embeddings");
  for (std::size_t i = 0; i < n; ++i)
    if (modality[i] == Modality::text &&
        (positions[i].t != positions[i].h || positions[i].t != positions[i].w))
      throw std::invalid_argument("TokenSequence: text token with non-diagonal position");
}

std::size_t KvCache::total_elements() const {
  std::size_t n = 0;
  for (const auto& layer : layers)
    for (const auto& e : layer)
      n += static_cast<std::size_t>(e.latent.size() + e.rope_key.size());
  return n;
}

namespace {

// Rotate pairs of `v`; pair j uses the frequency of subspace freq_index(j).
template <typename FreqIndex>
Vector rotate_pairs(const RopeSpec& spec, const Vector& v, const Pos3& pos, int n_pairs,
                    FreqIndex freq_index) {
  Vector out = v;
  for (int j = 0; j < n_pairs; ++j) {
    const double a = spec.angle(freq_index(j), pos);
    const double c = std::cos(a), s = std::sin(a);
    const double x = v(2 * j), y = v(2 * j + 1);
    out(2 * j) = c * x - s * y;
    out(2 * j + 1) = s * x + c * y;
  }
  return out;
}

void zero_subspaces(Matrix& head_slice, const std::vector<int>& subspaces) {
  for (int k : subspaces) {
    head_slice.row(2 * k).setZero();
    head_slice.row(2 * k + 1).setZero();
  }
}

ForwardResult attention_with_retained(const ModelConfig& cfg, const AttentionWeights& w,
                                      const TokenSequence& seq,
                                      const SubspaceSelection* selection,
                                      const std::vector<int>* ablated, int only_head) {
  cfg.validate();
  seq.validate(cfg.d_model);
  if (w.w_q.rows() != cfg.n_heads * cfg.d_head || w.w_q.cols() != cfg.d_model ||
      w.w_k.rows() != cfg.n_kv_heads * cfg.d_head || w.w_v.rows() != cfg.n_kv_heads * cfg.d_head ||
      w.w_o.rows() != cfg.d_model || w.w_o.cols() != cfg.n_heads * cfg.d_head)
    throw std::invalid_argument("forward_mha_gqa: weight shape mismatch");

  const int n = seq.n_tokens();
  const RopeSpec spec = cfg.rope_spec();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  Matrix q_all = w.w_q * seq.embeddings;  // n_heads*d_head x n
  Matrix k_all = w.w_k * seq.embeddings;
  Matrix v_all = w.w_v * seq.embeddings;

  ForwardResult res;
  res.attn.resize(cfg.n_heads);
  Matrix concat = Matrix::Zero(cfg.n_heads * cfg.d_head, n);

  for (int h = 0; h < cfg.n_heads; ++h) {
    const int g = cfg.kv_group_of_head(h);
    Matrix q = q_all.middleRows(h * cfg.d_head, cfg.d_head);
    Matrix k = k_all.middleRows(g * cfg.d_head, cfg.d_head);
    const Matrix v = v_all.middleRows(g * cfg.d_head, cfg.d_head);
    if (ablated != nullptr && (only_head < 0 || only_head == h)) {
      zero_subspaces(q, *ablated);
      zero_subspaces(k, *ablated);
    }
    SubspaceSet retained = SubspaceSet::everything();
    if (selection != nullptr) retained = SubspaceSet::of(selection->retained_of(0, g));

    Matrix qr(cfg.d_head, n), kr(cfg.d_head, n);
    for (int t = 0; t < n; ++t) {
      qr.col(t) = apply_rope(spec, q.col(t), seq.positions[t], retained);
      kr.col(t) = apply_rope(spec, k.col(t), seq.positions[t], retained);
    }
    const Matrix scores = (qr.transpose() * kr) * scale;
    const Matrix attn = softmax_rows(scores, /*causal=*/true);
    concat.middleRows(h * cfg.d_head, cfg.d_head) = v * attn.transpose();
    res.attn[h] = attn;
  }
  res.output = w.w_o * concat;
  return res;
}

}  // namespace

ForwardResult forward_mha_gqa(const ModelConfig& cfg, const AttentionWeights& w,
                              const TokenSequence& seq) {
  return attention_with_retained(cfg, w, seq, nullptr, nullptr, -1);
}

ForwardResult forward_mha_gqa_masked(const ModelConfig& cfg, const AttentionWeights& w,
                                     const TokenSequence& seq,
                                     const std::vector<int>& ablated_subspaces, int only_head) {
  return attention_with_retained(cfg, w, seq, nullptr, &ablated_subspaces, only_head);
}

ForwardResult forward_partial_rope(const ModelConfig& cfg, const AttentionWeights& w,
                                   const TokenSequence& seq, const SubspaceSelection& selection) {
  return attention_with_retained(cfg, w, seq, &selection, nullptr, -1);
}

ForwardResult forward_mla(const ModelConfig& cfg, const MlaLayerWeights& w,
                          const TokenSequence& seq, std::vector<KvCacheEntry>& layer_cache) {
  cfg.validate();
  seq.validate(cfg.d_model);
  const int n_new = seq.n_tokens();
  const int n_old = static_cast<int>(layer_cache.size());
  const int n_total = n_old + n_new;
  const RopeSpec spec = cfg.rope_spec();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  const int r = cfg.d_rope / 2;

  // Append one entry per new token; previously stored entries stay untouched.
  for (int t = 0; t < n_new; ++t) {
    const Modality m = seq.modality[t];
    const int g0_rows = static_cast<int>(w.k_rope_rows.rows());
    if (g0_rows != cfg.n_kv_heads * cfg.d_rope)
      throw std::invalid_argument("forward_mla: k_rope_rows shape mismatch");
    KvCacheEntry e;
    e.tag = m;
    e.latent.resize(cfg.n_kv_heads * cfg.d_latent);
    e.rope_key.resize(cfg.n_kv_heads * cfg.d_rope);
    const Vector x = seq.embeddings.col(t);
    const Vector kr_raw = w.k_rope_rows * x;
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      const auto& retained = w.selection.retained_of(0, g);
      e.latent.segment(g * cfg.d_latent, cfg.d_latent) = w.down(m, g) * x;
      e.rope_key.segment(g * cfg.d_rope, cfg.d_rope) =
          rotate_pairs(spec, kr_raw.segment(g * cfg.d_rope, cfg.d_rope), seq.positions[t], r,
                       [&](int j) { return retained.at(j); });
    }
    layer_cache.push_back(std::move(e));
  }

  // Reconstruct k_nope / v for every cached token once per kv head.
  std::vector<Matrix> k_nope(cfg.n_kv_heads), values(cfg.n_kv_heads);
  for (int g = 0; g < cfg.n_kv_heads; ++g) {
    k_nope[g].resize(cfg.d_nope(), n_total);
    values[g].resize(cfg.d_head, n_total);
    for (int j = 0; j < n_total; ++j) {
      const KvCacheEntry& e = layer_cache[j];
      const Vector c = e.latent.segment(g * cfg.d_latent, cfg.d_latent);
      const Matrix& up = w.up(e.tag, g);
      k_nope[g].col(j) = up.topRows(cfg.d_nope()) * c;
      values[g].col(j) = up.bottomRows(cfg.d_head) * c;
    }
  }

  ForwardResult res;
  res.attn.resize(cfg.n_heads);
  Matrix concat = Matrix::Zero(cfg.n_heads * cfg.d_head, n_new);
  const Matrix q_all = w.w_q * seq.embeddings;

  for (int h = 0; h < cfg.n_heads; ++h) {
    const int g = cfg.kv_group_of_head(h);
    const auto& retained = w.selection.retained_of(0, g);
    Matrix attn = Matrix::Zero(n_new, n_total);
    for (int t = 0; t < n_new; ++t) {
      const Vector q = q_all.col(t).segment(h * cfg.d_head, cfg.d_head);
      const Vector q_rope =
          rotate_pairs(spec, q.head(cfg.d_rope), seq.positions[t], r,
                       [&](int j) { return retained.at(j); });
      const Vector q_nope = q.tail(cfg.d_nope());
      const int last = n_old + t;  // causal: attend to prefix + self
      Vector row(last + 1);
      for (int j = 0; j <= last; ++j) {
        const KvCacheEntry& e = layer_cache[j];
        const double s_rope = q_rope.dot(e.rope_key.segment(g * cfg.d_rope, cfg.d_rope));
        const double s_nope = q_nope.dot(k_nope[g].col(j));
        row(j) = (s_rope + s_nope) * scale;
      }
      const double mx = row.maxCoeff();
      Vector p = (row.array() - mx).exp();
      p /= p.sum();
      attn.row(t).head(last + 1) = p.transpose();
      concat.col(t).segment(h * cfg.d_head, cfg.d_head) = values[g].leftCols(last + 1) * p;
    }
    res.attn[h] = std::move(attn);
  }
  res.output = w.w_o * concat;
  return res;
}

ToyModel::Trace ToyModel::forward(const TokenSequence& seq) const {
  Trace tr;
  tr.hidden.push_back(seq.embeddings);
  TokenSequence cur = seq;
  for (const auto& layer : layers) {
    cur.embeddings = tr.hidden.back();
    ForwardResult r = forward_mha_gqa(cfg, layer, cur);
    tr.hidden.push_back(tr.hidden.back() + r.output);
    tr.layer_output.push_back(std::move(r.output));
  }
  return tr;
}

MlaModel::Trace MlaModel::forward(const TokenSequence& seq, KvCache& cache) const {
  if (static_cast<int>(cache.layers.size()) != cfg.n_layers)
    throw std::invalid_argument("MlaModel::forward: cache layer count mismatch");
  Trace tr;
  tr.hidden.push_back(seq.embeddings);
  TokenSequence cur = seq;
  for (int l = 0; l < cfg.n_layers; ++l) {
    cur.embeddings = tr.hidden.back();
    ForwardResult r = forward_mla(cfg, layers[l], cur, cache.layers[l]);
    tr.hidden.push_back(tr.hidden.back() + r.output);
    tr.layer_output.push_back(std::move(r.output));
  }
  return tr;
}

ToyModel random_toy_model(const ModelConfig& cfg, std::uint64_t seed, double scale) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale / std::sqrt(static_cast<double>(cfg.d_model)));
  auto fill = [&](Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
    return m;
  };
  ToyModel model;
  model.cfg = cfg;
  for (int l = 0; l < cfg.n_layers; ++l) {
    AttentionWeights w;
    w.w_q = fill(cfg.n_heads * cfg.d_head, cfg.d_model);
    w.w_k = fill(cfg.n_kv_heads * cfg.d_head, cfg.d_model);
    w.w_v = fill(cfg.n_kv_heads * cfg.d_head, cfg.d_model);
    w.w_o = fill(cfg.d_model, cfg.n_heads * cfg.d_head);
    model.layers.push_back(std::move(w));
  }
  return model;
}

TokenSequence random_sequence(const ModelConfig& cfg, const std::vector<SegmentSpec>& layout,
                              std::mt19937_64& rng) {
  TokenSequence seq;
  seq.positions = assign_positions(layout);
  const int n = static_cast<int>(seq.positions.size());
  for (const auto& seg : layout) {
    const Modality m =
        seg.kind == SegmentSpec::Kind::text ? Modality::text : Modality::visual;
    for (int i = 0; i < seg.n_tokens(); ++i) seq.modality.push_back(m);
  }
  std::normal_distribution<double> dist(0.0, 1.0);
  seq.embeddings.resize(cfg.d_model, n);
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < cfg.d_model; ++i) seq.embeddings(i, j) = dist(rng);
  return seq;
}

}  // namespace mlaforge
