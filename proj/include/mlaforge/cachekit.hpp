#pragma once

#include "mlaforge/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mlaforge {

enum class CacheBaseline { mha, gqa };

/// Per-token cache cost and the reduction against a full-width 16-bit
/// MHA/GQA baseline. Quantization metadata is excluded from the arithmetic.
struct CacheBudget {
  CacheBaseline baseline = CacheBaseline::mha;
  int bits = 16;
  std::int64_t per_token_elements = 0;   // MLA: n_layers * n_kv_heads * (d_latent + d_rope)
  std::int64_t baseline_elements = 0;    // n_layers * 2 * B * d_head
  double reduction_pct = 0.0;            // 100 * (1 - mla_bits / baseline_bits)
};

CacheBudget account(const ModelConfig& cfg, CacheBaseline baseline, int bits);

/// Display form of a reduction, e.g. "-84.38%". Rounds half away from zero
/// at two decimals (the convention the reference percentages follow).
std::string format_reduction(const CacheBudget& budget);

/// Asymmetric round-to-nearest quantization with per-group scale/zero-point.
struct QuantSpec {
  int bits = 4;        // 4 or 2
  int group_size = 64; // last group may be short
};

struct QuantizedVector {
  std::vector<std::uint8_t> codes;
  std::vector<double> scale;  // per group
  std::vector<double> zero;   // per group (the group minimum)
};

struct QuantizedEntry {
  QuantizedVector latent;
  QuantizedVector rope_key;
  Modality tag = Modality::text;
};

struct QuantizedKvCache {
  QuantSpec spec;
  std::vector<std::vector<QuantizedEntry>> layers;

  /// Exact inverse mapping code -> zero + scale * code.
  KvCache dequantize() const;
};

QuantizedKvCache quantize_cache(const KvCache& cache, const QuantSpec& spec);

}  // namespace mlaforge
