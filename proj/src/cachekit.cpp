#include "mlaforge/cachekit.hpp"

#include <cmath>
#include <cstdio>

namespace mlaforge {

CacheBudget account(const ModelConfig& cfg, CacheBaseline baseline, int bits) {
  cfg.validate();
  CacheBudget b;
  b.baseline = baseline;
  b.bits = bits;
  const std::int64_t heads = baseline == CacheBaseline::mha ? cfg.n_heads : cfg.n_kv_heads;
  b.per_token_elements =
      static_cast<std::int64_t>(cfg.n_layers) * cfg.n_kv_heads * (cfg.d_latent + cfg.d_rope);
  b.baseline_elements = static_cast<std::int64_t>(cfg.n_layers) * 2 * heads * cfg.d_head;
  b.reduction_pct =
      100.0 * (1.0 - static_cast<double>(b.per_token_elements) * bits /
                         (static_cast<double>(b.baseline_elements) * 16.0));
  return b;
}

std::string format_reduction(const CacheBudget& budget) {
  const double rounded = std::round(budget.reduction_pct * 100.0) / 100.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%", -rounded);
  return buf;
}

namespace {

QuantizedVector quantize_vector(const Vector& v, const QuantSpec& spec) {
  const int levels = (1 << spec.bits) - 1;
  QuantizedVector q;
  q.codes.resize(v.size());
  for (Eigen::Index g0 = 0; g0 < v.size(); g0 += spec.group_size) {
    const Eigen::Index len = std::min<Eigen::Index>(spec.group_size, v.size() - g0);
    const auto group = v.segment(g0, len);
    const double mn = group.minCoeff();
    const double mx = group.maxCoeff();
    const double scale = (mx - mn) / levels;
    q.scale.push_back(scale);
    q.zero.push_back(mn);
    for (Eigen::Index i = 0; i < len; ++i) {
      double code = scale > 0.0 ? std::round((group(i) - mn) / scale) : 0.0;
      code = std::min(std::max(code, 0.0), static_cast<double>(levels));
      q.codes[g0 + i] = static_cast<std::uint8_t>(code);
    }
  }
  return q;
}

Vector dequantize_vector(const QuantizedVector& q, int group_size) {
  Vector v(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    const std::size_t g = i / group_size;
    v(i) = q.zero[g] + q.scale[g] * q.codes[i];
  }
  return v;
}

}  // namespace

QuantizedKvCache quantize_cache(const KvCache& cache, const QuantSpec& spec) {
  if (spec.bits != 4 && spec.bits != 2)
    throw std::invalid_argument("quantize_cache: bits must be 4 or 2");
  if (spec.group_size <= 0) throw std::invalid_argument("quantize_cache: group_size");
  if (cache.storage_bits != 16)
    throw std::invalid_argument("quantize_cache: cache must be at 16-bit storage");
  QuantizedKvCache out;
  out.spec = spec;
  out.layers.resize(cache.layers.size());
  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    for (const auto& e : cache.layers[l]) {
      QuantizedEntry qe;
      qe.tag = e.tag;
      qe.latent = quantize_vector(e.latent, spec);
      qe.rope_key = quantize_vector(e.rope_key, spec);
      out.layers[l].push_back(std::move(qe));
    }
  }
  return out;
}

KvCache QuantizedKvCache::dequantize() const {
  KvCache cache;
  cache.storage_bits = 16;
  cache.layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    for (const auto& qe : layers[l]) {
      KvCacheEntry e;
      e.tag = qe.tag;
      e.latent = dequantize_vector(qe.latent, spec.group_size);
      e.rope_key = dequantize_vector(qe.rope_key, spec.group_size);
      cache.layers[l].push_back(std::move(e));
    }
  }
  return cache;
}

}  // namespace mlaforge
