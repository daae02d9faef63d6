#pragma once

#include "mlaforge/model.hpp"
#include "mlaforge/selection.hpp"

#include <string>

namespace mlaforge {

enum class TrainStage { stage1, stage2 };

/// Which parameter classes a training stage may touch. Stage 1 tunes only
/// the query/key projections of the partial-RoPE student; stage 2 only the
/// parameters of the MLA layers. Everything else stays frozen.
struct TrainMask {
  TrainStage stage = TrainStage::stage1;
  std::vector<std::string> tunable;

  static TrainMask for_stage(TrainStage stage);
  bool has(const std::string& name) const;
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 1e-2;
  int steps = 100;
  double warmup_ratio = 0.1;
  double decay_ratio = 0.1;
  std::uint64_t seed = 0;

  /// Linear warmup, constant middle, linear decay.
  double lr_at(int step) const;
};

/// Partial-RoPE student of stage 1: original layer weights with only the
/// selected subspaces rotated.
struct Stage1Student {
  ModelConfig cfg;
  std::vector<AttentionWeights> layers;
  SubspaceSelection selection;
};

struct GqaLayerGrads {
  Matrix w_q;
  Matrix w_k;
};

struct MlaLayerGrads {
  Matrix w_q;
  Matrix k_rope_rows;
  std::array<std::vector<Matrix>, 2> w_down;  // [modality][kv head]
  std::array<std::vector<Matrix>, 2> w_up;
};

/// Layerwise output-matching distillation loss: each student layer runs on
/// the teacher's hidden state at that layer, and the per-layer MSE against
/// the teacher's attention output is summed over layers. Gradients are
/// analytic and restricted to the mask; pass grads = nullptr for loss only.
double stage1_loss_and_grads(const Stage1Student& student, const ToyModel::Trace& teacher,
                             const TokenSequence& seq, const TrainMask& mask,
                             std::vector<GqaLayerGrads>* grads);

double stage2_loss_and_grads(const MlaModel& student, const ToyModel::Trace& teacher,
                             const TokenSequence& seq, const TrainMask& mask,
                             std::vector<MlaLayerGrads>* grads);

struct TrainTrace {
  std::vector<double> loss;
  std::vector<double> lr;
};

/// Plain full-batch gradient descent under the stage mask. Aborts on a
/// non-finite loss, reporting the step index.
TrainTrace train_stage1(Stage1Student& student, const ToyModel& teacher,
                        const std::vector<TokenSequence>& data, const TrainMask& mask,
                        const TrainConfig& cfg);

TrainTrace train_stage2(MlaModel& student, const ToyModel& teacher,
                        const std::vector<TokenSequence>& data, const TrainMask& mask,
                        const TrainConfig& cfg);

}  // namespace mlaforge
