#pragma once

#include "mlaforge/mdsvd.hpp"
#include "mlaforge/model.hpp"
#include "mlaforge/selection.hpp"

namespace mlaforge {

struct LayerConversionReport {
  int layer = 0;
  SelectionStrategy strategy = SelectionStrategy::two_norm;
  std::vector<std::vector<int>> retained;  // per kv group
  double loss_visual = 0.0;                // summed over kv heads
  double loss_text = 0.0;
};

struct ConversionReport {
  std::vector<LayerConversionReport> layers;
  std::int64_t cache_elements_before = 0;  // full MHA/GQA cache per token
  std::int64_t cache_elements_after = 0;   // MLA latent + rope key per token
  double equivalence_residual = 0.0;       // max relative output difference on calib
};

struct ConvertOptions {
  SelectionStrategy strategy = SelectionStrategy::two_norm;
  double ridge = 1e-6;
};

struct ConvertResult {
  MlaModel model;
  ConversionReport report;
};

/// MHA/GQA -> MLA conversion: select retained subspaces from calibration
/// data, split each head's rope/nope rows, factorize the stacked
/// [k_nope; v] weight per modality and kv head, and assemble MLA layers.
/// Calibration activations are the original model's hidden states at each
/// layer input. Retained w_k rows are copied unchanged.
ConvertResult convert(const ToyModel& teacher, const std::vector<TokenSequence>& calib,
                      const ConvertOptions& options);

/// Assemble one MLA layer from original weights, a single-layer selection
/// view and per-modality activations at the layer input.
MlaLayerWeights convert_layer(const ModelConfig& cfg, const AttentionWeights& w,
                              const SubspaceSelection& layer_selection, const Matrix& x_visual,
                              const Matrix& x_text, double ridge, LayerConversionReport* report);

/// Worker cap shared by parallel sections; reads MLAFORGE_THREADS, falls back
/// to the hardware concurrency.
int worker_count();

}  // namespace mlaforge
