#include "mlaforge/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace mlaforge {

namespace {

const std::set<std::string> kStage1Params = {"w_q", "w_k"};
const std::set<std::string> kStage2Params = {"w_q", "k_rope_rows", "w_down", "w_up"};

// dS for row-wise softmax with causal support: row t uses entries j <= t.
Matrix softmax_backward_causal(const Matrix& a, const Matrix& da) {
  Matrix ds = Matrix::Zero(a.rows(), a.cols());
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    const Eigen::Index last = std::min<Eigen::Index>(t, a.cols() - 1);
    double dot = 0.0;
    for (Eigen::Index j = 0; j <= last; ++j) dot += a(t, j) * da(t, j);
    for (Eigen::Index j = 0; j <= last; ++j) ds(t, j) = a(t, j) * (da(t, j) - dot);
  }
  return ds;
}

// Rotate (sign = +1) or un-rotate (sign = -1) pair j of every column with the
// frequency of subspace freq[j]; pairs beyond freq.size() pass through.
Matrix rotate_columns(const RopeSpec& spec, const Matrix& m, const std::vector<Pos3>& pos,
                      const std::vector<int>& freq, double sign) {
  Matrix out = m;
  for (Eigen::Index t = 0; t < m.cols(); ++t) {
    for (std::size_t j = 0; j < freq.size(); ++j) {
      const double a = sign * spec.angle(freq[j], pos[t]);
      const double c = std::cos(a), s = std::sin(a);
      const double x = m(2 * j, t), y = m(2 * j + 1, t);
      out(2 * j, t) = c * x - s * y;
      out(2 * j + 1, t) = s * x + c * y;
    }
  }
  return out;
}

}  // namespace

TrainMask TrainMask::for_stage(TrainStage stage) {
  TrainMask m;
  m.stage = stage;
  const auto& names = stage == TrainStage::stage1 ? kStage1Params : kStage2Params;
  m.tunable.assign(names.begin(), names.end());
  return m;
}

bool TrainMask::has(const std::string& name) const {
  return std::find(tunable.begin(), tunable.end(), name) != tunable.end();
}

void TrainMask::validate() const {
  const auto& known = stage == TrainStage::stage1 ? kStage1Params : kStage2Params;
  for (const auto& name : tunable)
    if (!known.contains(name))
      throw std::invalid_argument("TrainMask: unknown parameter '" + name + "'");
}

double TrainConfig::lr_at(int step) const {
  if (warmup_ratio < 0 || warmup_ratio > 1 || decay_ratio < 0 || decay_ratio > 1)
    throw std::invalid_argument("TrainConfig: ratios must be in [0, 1]");
  const int warmup = static_cast<int>(std::llround(warmup_ratio * steps));
  const int decay = static_cast<int>(std::llround(decay_ratio * steps));
  if (warmup > 0 && step < warmup)
    return learning_rate * static_cast<double>(step + 1) / warmup;
  if (decay > 0 && step >= steps - decay)
    return learning_rate * static_cast<double>(steps - step) / decay;
  return learning_rate;
}

double stage1_loss_and_grads(const Stage1Student& student, const ToyModel::Trace& teacher,
                             const TokenSequence& seq, const TrainMask& mask,
                             std::vector<GqaLayerGrads>* grads) {
  mask.validate();
  if (mask.stage != TrainStage::stage1)
    throw std::invalid_argument("stage1_loss_and_grads: wrong stage mask");
  const ModelConfig& cfg = student.cfg;
  const RopeSpec spec = cfg.rope_spec();
  const int n = seq.n_tokens();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  const double norm = 1.0 / (static_cast<double>(cfg.d_model) * n);

  if (grads != nullptr) {
    grads->assign(cfg.n_layers, {});
    for (auto& g : *grads) {
      g.w_q = Matrix::Zero(cfg.n_heads * cfg.d_head, cfg.d_model);
      g.w_k = Matrix::Zero(cfg.n_kv_heads * cfg.d_head, cfg.d_model);
    }
  }

  double loss = 0.0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Matrix& x = teacher.hidden[l];
    const AttentionWeights& w = student.layers[l];
    const Matrix q_all = w.w_q * x;
    const Matrix k_all = w.w_k * x;
    const Matrix v_all = w.w_v * x;

    Matrix concat(cfg.n_heads * cfg.d_head, n);
    struct HeadCtx {
      Matrix qr, kr, attn;
    };
    std::vector<HeadCtx> ctx(cfg.n_heads);
    std::vector<Matrix> kr_group(cfg.n_kv_heads);

    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = cfg.kv_group_of_head(h);
      const auto& retained = student.selection.retained_of(l, g);
      Matrix qr(cfg.d_head, n);
      for (int t = 0; t < n; ++t)
        qr.col(t) = apply_rope(spec, q_all.col(t).segment(h * cfg.d_head, cfg.d_head),
                               seq.positions[t], SubspaceSet::of(retained));
      if (kr_group[g].size() == 0) {
        Matrix kr(cfg.d_head, n);
        for (int t = 0; t < n; ++t)
          kr.col(t) = apply_rope(spec, k_all.col(t).segment(g * cfg.d_head, cfg.d_head),
                                 seq.positions[t], SubspaceSet::of(retained));
        kr_group[g] = std::move(kr);
      }
      const Matrix scores = (qr.transpose() * kr_group[g]) * scale;
      const Matrix attn = softmax_rows(scores, true);
      concat.middleRows(h * cfg.d_head, cfg.d_head) =
          v_all.middleRows(g * cfg.d_head, cfg.d_head) * attn.transpose();
      ctx[h] = {std::move(qr), kr_group[g], attn};
    }
    const Matrix y = w.w_o * concat;
    const Matrix diff = y - teacher.layer_output[l];
    loss += diff.squaredNorm() * norm;
    if (grads == nullptr) continue;

    const Matrix dy = 2.0 * norm * diff;
    const Matrix dconcat = w.w_o.transpose() * dy;
    std::vector<Matrix> dk_rot(cfg.n_kv_heads, Matrix::Zero(cfg.d_head, n));
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = cfg.kv_group_of_head(h);
      const auto& retained = student.selection.retained_of(l, g);
      const Matrix dO = dconcat.middleRows(h * cfg.d_head, cfg.d_head);
      const Matrix v = v_all.middleRows(g * cfg.d_head, cfg.d_head);
      const Matrix da = dO.transpose() * v;
      const Matrix ds = softmax_backward_causal(ctx[h].attn, da);
      const Matrix dq_rot = (ctx[h].kr * ds.transpose()) * scale;
      dk_rot[g] += (ctx[h].qr * ds) * scale;
      // Un-rotate: apply the inverse rotation to each column.
      Matrix dq(cfg.d_head, n);
      for (int t = 0; t < n; ++t) {
        Pos3 neg{-seq.positions[t].t, -seq.positions[t].h, -seq.positions[t].w};
        dq.col(t) = apply_rope(spec, dq_rot.col(t), neg, SubspaceSet::of(retained));
      }
      if (mask.has("w_q"))
        (*grads)[l].w_q.middleRows(h * cfg.d_head, cfg.d_head) += dq * x.transpose();
    }
    if (mask.has("w_k")) {
      for (int g = 0; g < cfg.n_kv_heads; ++g) {
        const auto& retained = student.selection.retained_of(l, g);
        Matrix dk(cfg.d_head, n);
        for (int t = 0; t < n; ++t) {
          Pos3 neg{-seq.positions[t].t, -seq.positions[t].h, -seq.positions[t].w};
          dk.col(t) = apply_rope(spec, dk_rot[g].col(t), neg, SubspaceSet::of(retained));
        }
        (*grads)[l].w_k.middleRows(g * cfg.d_head, cfg.d_head) += dk * x.transpose();
      }
    }
  }
  return loss;
}

double stage2_loss_and_grads(const MlaModel& student, const ToyModel::Trace& teacher,
                             const TokenSequence& seq, const TrainMask& mask,
                             std::vector<MlaLayerGrads>* grads) {
  mask.validate();
  if (mask.stage != TrainStage::stage2)
    throw std::invalid_argument("stage2_loss_and_grads: wrong stage mask");
  const ModelConfig& cfg = student.cfg;
  const RopeSpec spec = cfg.rope_spec();
  const int n = seq.n_tokens();
  const int dn = cfg.d_nope();
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  const double norm = 1.0 / (static_cast<double>(cfg.d_model) * n);

  if (grads != nullptr) {
    grads->assign(cfg.n_layers, {});
    for (auto& g : *grads) {
      g.w_q = Matrix::Zero(cfg.n_heads * cfg.d_head, cfg.d_model);
      g.k_rope_rows = Matrix::Zero(cfg.n_kv_heads * cfg.d_rope, cfg.d_model);
      for (int m = 0; m < 2; ++m) {
        g.w_down[m].assign(cfg.n_kv_heads, Matrix::Zero(cfg.d_latent, cfg.d_model));
        g.w_up[m].assign(cfg.n_kv_heads, Matrix::Zero(cfg.d_kv_joint(), cfg.d_latent));
      }
    }
  }

  double loss = 0.0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Matrix& x = teacher.hidden[l];
    const MlaLayerWeights& w = student.layers[l];
    const Matrix q_all = w.w_q * x;
    const Matrix kr_raw_all = w.k_rope_rows * x;

    // Per kv head: latents, rotated rope keys, reconstructed k_nope / v.
    std::vector<Matrix> latents(cfg.n_kv_heads), kr(cfg.n_kv_heads), kn(cfg.n_kv_heads),
        vals(cfg.n_kv_heads);
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      const auto& retained = w.selection.retained_of(0, g);
      latents[g].resize(cfg.d_latent, n);
      kn[g].resize(dn, n);
      vals[g].resize(cfg.d_head, n);
      for (int t = 0; t < n; ++t) {
        const Modality m = seq.modality[t];
        latents[g].col(t) = w.down(m, g) * x.col(t);
        kn[g].col(t) = w.up(m, g).topRows(dn) * latents[g].col(t);
        vals[g].col(t) = w.up(m, g).bottomRows(cfg.d_head) * latents[g].col(t);
      }
      kr[g] = rotate_columns(spec, kr_raw_all.middleRows(g * cfg.d_rope, cfg.d_rope),
                             seq.positions, retained, +1.0);
    }

    Matrix concat(cfg.n_heads * cfg.d_head, n);
    std::vector<Matrix> q_rot(cfg.n_heads), attn(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = cfg.kv_group_of_head(h);
      const auto& retained = w.selection.retained_of(0, g);
      const Matrix q = q_all.middleRows(h * cfg.d_head, cfg.d_head);
      Matrix qr = q;
      qr.topRows(cfg.d_rope) =
          rotate_columns(spec, q.topRows(cfg.d_rope), seq.positions, retained, +1.0);
      const Matrix scores =
          (qr.topRows(cfg.d_rope).transpose() * kr[g] + qr.bottomRows(dn).transpose() * kn[g]) *
          scale;
      attn[h] = softmax_rows(scores, true);
      concat.middleRows(h * cfg.d_head, cfg.d_head) = vals[g] * attn[h].transpose();
      q_rot[h] = std::move(qr);
    }
    const Matrix y = w.w_o * concat;
    const Matrix diff = y - teacher.layer_output[l];
    loss += diff.squaredNorm() * norm;
    if (grads == nullptr) continue;

    const Matrix dy = 2.0 * norm * diff;
    const Matrix dconcat = w.w_o.transpose() * dy;
    std::vector<Matrix> dkr(cfg.n_kv_heads, Matrix::Zero(cfg.d_rope, n));
    std::vector<Matrix> dkn(cfg.n_kv_heads, Matrix::Zero(dn, n));
    std::vector<Matrix> dvals(cfg.n_kv_heads, Matrix::Zero(cfg.d_head, n));

    for (int h = 0; h < cfg.n_heads; ++h) {
      const int g = cfg.kv_group_of_head(h);
      const auto& retained = w.selection.retained_of(0, g);
      const Matrix dO = dconcat.middleRows(h * cfg.d_head, cfg.d_head);
      const Matrix da = dO.transpose() * vals[g];
      const Matrix ds = softmax_backward_causal(attn[h], da);
      dvals[g] += dO * attn[h];
      dkr[g] += (q_rot[h].topRows(cfg.d_rope) * ds) * scale;
      dkn[g] += (q_rot[h].bottomRows(dn) * ds) * scale;
      if (mask.has("w_q")) {
        Matrix dq(cfg.d_head, n);
        dq.topRows(cfg.d_rope) = rotate_columns(
            spec, Matrix((kr[g] * ds.transpose()) * scale), seq.positions, retained, -1.0);
        dq.bottomRows(dn) = (kn[g] * ds.transpose()) * scale;
        (*grads)[l].w_q.middleRows(h * cfg.d_head, cfg.d_head) += dq * x.transpose();
      }
    }
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      const auto& retained = w.selection.retained_of(0, g);
      if (mask.has("k_rope_rows")) {
        const Matrix dkr_raw = rotate_columns(spec, dkr[g], seq.positions, retained, -1.0);
        (*grads)[l].k_rope_rows.middleRows(g * cfg.d_rope, cfg.d_rope) +=
            dkr_raw * x.transpose();
      }
      for (int t = 0; t < n; ++t) {
        const int m = static_cast<int>(seq.modality[t]);
        Vector du(cfg.d_kv_joint());
        du << dkn[g].col(t), dvals[g].col(t);
        if (mask.has("w_up")) (*grads)[l].w_up[m][g] += du * latents[g].col(t).transpose();
        if (mask.has("w_down")) {
          const Vector dc = w.w_up[m][g].transpose() * du;
          (*grads)[l].w_down[m][g] += dc * x.col(t).transpose();
        }
      }
    }
  }
  return loss;
}

namespace {

void accumulate(GqaLayerGrads& a, const GqaLayerGrads& b) {
  a.w_q += b.w_q;
  a.w_k += b.w_k;
}

void accumulate(MlaLayerGrads& a, const MlaLayerGrads& b) {
  a.w_q += b.w_q;
  a.k_rope_rows += b.k_rope_rows;
  for (int m = 0; m < 2; ++m)
    for (std::size_t g = 0; g < a.w_down[m].size(); ++g) {
      a.w_down[m][g] += b.w_down[m][g];
      a.w_up[m][g] += b.w_up[m][g];
    }
}

template <typename Student, typename Grads, typename LossFn, typename ApplyFn>
TrainTrace run_training(Student& student, const ToyModel& teacher,
                        const std::vector<TokenSequence>& data, const TrainConfig& cfg,
                        LossFn&& loss_fn, ApplyFn&& apply_fn) {
  if (data.empty()) throw std::invalid_argument("train_stage: empty data");
  if (cfg.steps < 0) throw std::invalid_argument("train_stage: negative step count");
  std::vector<ToyModel::Trace> traces;
  traces.reserve(data.size());
  for (const auto& seq : data) traces.push_back(teacher.forward(seq));

  TrainTrace trace;
  for (int step = 0; step < cfg.steps; ++step) {
    double loss = 0.0;
    std::vector<Grads> total;
    for (std::size_t s = 0; s < data.size(); ++s) {
      std::vector<Grads> g;
      loss += loss_fn(student, traces[s], data[s], &g);
      if (total.empty()) {
        total = std::move(g);
      } else {
        for (std::size_t l = 0; l < total.size(); ++l) accumulate(total[l], g[l]);
      }
    }
    loss /= static_cast<double>(data.size());
    if (!std::isfinite(loss))
      throw std::runtime_error("train_stage: non-finite loss at step " + std::to_string(step));
    const double lr = cfg.lr_at(step) / static_cast<double>(data.size());
    apply_fn(student, total, lr);
    trace.loss.push_back(loss);
    trace.lr.push_back(cfg.lr_at(step));
  }
  return trace;
}

}  // namespace

TrainTrace train_stage1(Stage1Student& student, const ToyModel& teacher,
                        const std::vector<TokenSequence>& data, const TrainMask& mask,
                        const TrainConfig& cfg) {
  return run_training<Stage1Student, GqaLayerGrads>(
      student, teacher, data, cfg,
      [&mask](const Stage1Student& s, const ToyModel::Trace& tr, const TokenSequence& seq,
              std::vector<GqaLayerGrads>* g) {
        return stage1_loss_and_grads(s, tr, seq, mask, g);
      },
      [&mask](Stage1Student& s, const std::vector<GqaLayerGrads>& g, double lr) {
        for (std::size_t l = 0; l < s.layers.size(); ++l) {
          if (mask.has("w_q")) s.layers[l].w_q -= lr * g[l].w_q;
          if (mask.has("w_k")) s.layers[l].w_k -= lr * g[l].w_k;
        }
      });
}

TrainTrace train_stage2(MlaModel& student, const ToyModel& teacher,
                        const std::vector<TokenSequence>& data, const TrainMask& mask,
                        const TrainConfig& cfg) {
  return run_training<MlaModel, MlaLayerGrads>(
      student, teacher, data, cfg,
      [&mask](const MlaModel& s, const ToyModel::Trace& tr, const TokenSequence& seq,
              std::vector<MlaLayerGrads>* g) {
        return stage2_loss_and_grads(s, tr, seq, mask, g);
      },
      [&mask](MlaModel& s, const std::vector<MlaLayerGrads>& g, double lr) {
        for (std::size_t l = 0; l < s.layers.size(); ++l) {
          if (mask.has("w_q")) s.layers[l].w_q -= lr * g[l].w_q;
          if (mask.has("k_rope_rows")) s.layers[l].k_rope_rows -= lr * g[l].k_rope_rows;
          for (int m = 0; m < 2; ++m)
            for (int kv = 0; kv < s.cfg.n_kv_heads; ++kv) {
              if (mask.has("w_down")) s.layers[l].w_down[m][kv] -= lr * g[l].w_down[m][kv];
              if (mask.has("w_up")) s.layers[l].w_up[m][kv] -= lr * g[l].w_up[m][kv];
            }
        }
      });
}

}  // namespace mlaforge
