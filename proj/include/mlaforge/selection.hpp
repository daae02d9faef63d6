#pragma once

#include "mlaforge/model.hpp"
#include "mlaforge/subspace.hpp"

namespace mlaforge {

/// Mean over calibration tokens of ||q^[2k,2k+1]|| * ||k^[2k,2k+1]||, taken on
/// the pre-rotation projections; for GQA the k chunk comes from the head's
/// shared kv head. Activations are the original model's hidden states.
SensitivityMap score_two_norm(const ToyModel& model, const std::vector<TokenSequence>& calib);

/// Frequency-wise KL sensitivity: expected row-wise KL between the full-rope
/// attention distribution and the one with subspace k zero-ablated in the q/k
/// projections of that head. Each sequence contributes its mean row KL.
SensitivityMap score_mkl(const ToyModel& model, const std::vector<TokenSequence>& calib);

/// Aggregate head scores by mean within each kv group, then keep the top-r
/// subspaces per (layer, group); ties break toward the lower index.
SubspaceSelection select_top_r(const SensitivityMap& map, const ModelConfig& cfg,
                               SelectionStrategy strategy);

/// Single-layer view of a multi-layer selection (for MlaLayerWeights).
SubspaceSelection layer_view(const SubspaceSelection& sel, int layer);

SensitivityMap score_with_strategy(const ToyModel& model,
                                   const std::vector<TokenSequence>& calib,
                                   SelectionStrategy strategy);

}  // namespace mlaforge
