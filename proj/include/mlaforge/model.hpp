#pragma once

#include "mlaforge/numerics.hpp"
#include "mlaforge/rope.hpp"
#include "mlaforge/subspace.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <vector>

namespace mlaforge {

enum class Modality : std::uint8_t { visual = 0, text = 1 };
inline constexpr std::array<Modality, 2> kModalities = {Modality::visual, Modality::text};
inline const char* modality_name(Modality m) {
  return m == Modality::visual ? "visual" : "text";
}

struct ModelConfig {
  int n_layers = 1;
  int n_heads = 1;     // query heads
  int n_kv_heads = 1;
  int d_model = 0;
  int d_head = 0;      // per-head width
  RopeKind rope_kind = RopeKind::vanilla_1d;
  double rope_base = 10000.0;
  int d_rope = 0;      // retained rotary dims per head; r = d_rope / 2 subspaces
  int d_latent = 0;    // latent width per kv head

  int group_size() const { return n_heads / n_kv_heads; }
  int kv_group_of_head(int head) const { return head / group_size(); }
  int d_nope() const { return d_head - d_rope; }
  int d_kv_joint() const { return 2 * d_head - d_rope; }  // rows of [k_nope; v]
  RopeSpec rope_spec() const { return RopeSpec{rope_kind, rope_base, d_head}; }
  void validate() const;
};

/// One pre-conversion attention layer (MHA when n_kv_heads == n_heads).
struct AttentionWeights {
  Matrix w_q;  // n_heads * d_head x d_model
  Matrix w_k;  // n_kv_heads * d_head x d_model
  Matrix w_v;  // n_kv_heads * d_head x d_model
  Matrix w_o;  // d_model x n_heads * d_head
};

/// One converted MLA layer. Factor pairs are per modality and per kv head;
/// the top d_nope rows of w_up reconstruct k_nope, the bottom d_head rows v.
struct MlaLayerWeights {
  SubspaceSelection selection;  // single-layer view (layer index 0)
  Matrix w_q;                   // rope dims permuted to the front per head
  Matrix k_rope_rows;           // n_kv_heads * d_rope x d_model, original w_k rows
  // indexed [modality][kv head]
  std::array<std::vector<Matrix>, 2> w_down;  // d_latent x d_model
  std::array<std::vector<Matrix>, 2> w_up;    // (2 d_head - d_rope) x d_latent
  Matrix w_o;

  const Matrix& down(Modality m, int g) const { return w_down[static_cast<int>(m)].at(g); }
  const Matrix& up(Modality m, int g) const { return w_up[static_cast<int>(m)].at(g); }
};

struct TokenSequence {
  Matrix embeddings;                // d_model x n_tokens
  std::vector<Modality> modality;   // per token
  std::vector<Pos3> positions;      // per token; text tokens have t == h == w

  int n_tokens() const { return static_cast<int>(embeddings.cols()); }
  void validate(int d_model) const;
};

/// Per-token cache entry of one layer: latent produced by the w_down of the
/// token's own modality, plus the post-rotation rope key (never recomputed).
struct KvCacheEntry {
  Vector latent;    // n_kv_heads * d_latent
  Vector rope_key;  // n_kv_heads * d_rope
  Modality tag = Modality::text;
};

struct KvCache {
  int storage_bits = 16;
  std::vector<std::vector<KvCacheEntry>> layers;  // [layer][token]

  static KvCache empty(int n_layers) {
    KvCache c;
    c.layers.resize(n_layers);
    return c;
  }
  int n_tokens() const { return layers.empty() ? 0 : static_cast<int>(layers[0].size()); }
  std::size_t total_elements() const;
};

struct ForwardResult {
  Matrix output;                    // d_model x n_tokens
  std::vector<Matrix> attn;         // per head, n x n causal rows
};

/// Single-layer MHA/GQA forward with full RoPE. Query head i reads kv head
/// i / group_size; scores scaled by 1/sqrt(d_head); causal masking always on.
ForwardResult forward_mha_gqa(const ModelConfig& cfg, const AttentionWeights& w,
                              const TokenSequence& seq);

/// Same forward with the given subspaces zero-ablated in the q/k projections
/// of every head (before rotation). Used by the MKL sensitivity scan.
ForwardResult forward_mha_gqa_masked(const ModelConfig& cfg, const AttentionWeights& w,
                                     const TokenSequence& seq,
                                     const std::vector<int>& ablated_subspaces, int only_head);

/// Partial-RoPE forward: rotate only the selected subspaces, everything else
/// becomes NoPE. `selection` is a single-layer view.
ForwardResult forward_partial_rope(const ModelConfig& cfg, const AttentionWeights& w,
                                   const TokenSequence& seq, const SubspaceSelection& selection);

/// Single-layer MLA forward. Appends one cache entry per new token and never
/// mutates previously stored entries; `seq` holds only the new tokens, whose
/// positions must continue the cached prefix.
ForwardResult forward_mla(const ModelConfig& cfg, const MlaLayerWeights& w,
                          const TokenSequence& seq, std::vector<KvCacheEntry>& layer_cache);

/// Attention-only residual stack (x <- x + attn(x) per layer); the
/// conversion touches nothing else, so no MLP or norm.
struct ToyModel {
  ModelConfig cfg;
  std::vector<AttentionWeights> layers;

  /// Layer outputs plus the hidden state entering each layer; hidden[l] is
  /// the input of layer l, hidden[n_layers] the final stream.
  struct Trace {
    std::vector<Matrix> hidden;        // n_layers + 1 entries
    std::vector<Matrix> layer_output;  // attention output of each layer
  };
  Trace forward(const TokenSequence& seq) const;
};

struct MlaModel {
  ModelConfig cfg;
  std::vector<MlaLayerWeights> layers;

  struct Trace {
    std::vector<Matrix> hidden;
    std::vector<Matrix> layer_output;
  };
  /// Extends `cache` by seq's tokens (monotone append).
  Trace forward(const TokenSequence& seq, KvCache& cache) const;
};

ToyModel random_toy_model(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.25);
TokenSequence random_sequence(const ModelConfig& cfg, const std::vector<SegmentSpec>& layout,
                              std::mt19937_64& rng);

}  // namespace mlaforge
