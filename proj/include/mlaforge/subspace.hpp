#pragma once

#include <map>
#include <string>
#include <vector>

namespace mlaforge {

enum class SelectionStrategy { two_norm, mkl };

/// Retained rotary subspaces per (layer, kv-group). All query heads of a
/// group share the set with their kv head. `retained` is sorted ascending;
/// `permutation` lists subspace indices retained-first in stable order, so
/// permuted pair j of a head slice is original subspace permutation[j].
struct SubspaceSelection {
  int n_layers = 0;
  int n_kv_groups = 0;
  int n_subspaces = 0;  // d_head / 2
  int r = 0;            // d_rope / 2
  SelectionStrategy strategy = SelectionStrategy::two_norm;
  // indexed [layer][group]
  std::vector<std::vector<std::vector<int>>> retained;
  std::vector<std::vector<std::vector<int>>> permutation;

  const std::vector<int>& retained_of(int layer, int group) const {
    return retained.at(layer).at(group);
  }
  const std::vector<int>& permutation_of(int layer, int group) const {
    return permutation.at(layer).at(group);
  }
};

/// Per (layer, head, subspace) importance score.
struct SensitivityMap {
  int n_layers = 0;
  int n_heads = 0;
  int n_subspaces = 0;
  std::vector<double> scores;  // [layer][head][k] flattened

  double& at(int layer, int head, int k) {
    return scores.at((static_cast<std::size_t>(layer) * n_heads + head) * n_subspaces + k);
  }
  double at(int layer, int head, int k) const {
    return scores.at((static_cast<std::size_t>(layer) * n_heads + head) * n_subspaces + k);
  }
};

}  // namespace mlaforge
