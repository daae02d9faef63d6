#include "mlaforge/selection.hpp"

#include <algorithm>
#include <numeric>

namespace mlaforge {

namespace {

SensitivityMap zero_map(const ModelConfig& cfg) {
  SensitivityMap map;
  map.n_layers = cfg.n_layers;
  map.n_heads = cfg.n_heads;
  map.n_subspaces = cfg.d_head / 2;
  map.scores.assign(static_cast<std::size_t>(cfg.n_layers) * cfg.n_heads * map.n_subspaces, 0.0);
  return map;
}

TokenSequence at_layer(const TokenSequence& seq, const Matrix& hidden) {
  TokenSequence s = seq;
  s.embeddings = hidden;
  return s;
}

}  // namespace

SensitivityMap score_two_norm(const ToyModel& model, const std::vector<TokenSequence>& calib) {
  if (calib.empty()) throw std::invalid_argument("score_two_norm: empty calibration batch");
  const ModelConfig& cfg = model.cfg;
  SensitivityMap map = zero_map(cfg);

  std::size_t total_tokens = 0;
  for (const auto& seq : calib) {
    const ToyModel::Trace tr = model.forward(seq);
    total_tokens += static_cast<std::size_t>(seq.n_tokens());
    for (int l = 0; l < cfg.n_layers; ++l) {
      const Matrix q = model.layers[l].w_q * tr.hidden[l];
      const Matrix k = model.layers[l].w_k * tr.hidden[l];
      for (int h = 0; h < cfg.n_heads; ++h) {
        const int g = cfg.kv_group_of_head(h);
        for (int s = 0; s < map.n_subspaces; ++s)
          for (int t = 0; t < seq.n_tokens(); ++t) {
            const double qn = q.col(t).segment(h * cfg.d_head + 2 * s, 2).norm();
            const double kn = k.col(t).segment(g * cfg.d_head + 2 * s, 2).norm();
            map.at(l, h, s) += qn * kn;
          }
      }
    }
  }
  for (double& v : map.scores) v /= static_cast<double>(total_tokens);
  return map;
}

SensitivityMap score_mkl(const ToyModel& model, const std::vector<TokenSequence>& calib) {
  if (calib.empty()) throw std::invalid_argument("score_mkl: empty calibration batch");
  for (const auto& seq : calib)
    if (seq.n_tokens() < 2)
      throw std::invalid_argument("score_mkl: calibration sequences must have length >= 2");

  const ModelConfig& cfg = model.cfg;
  SensitivityMap map = zero_map(cfg);

  for (const auto& seq : calib) {
    const ToyModel::Trace tr = model.forward(seq);
    const int n = seq.n_tokens();
    for (int l = 0; l < cfg.n_layers; ++l) {
      const TokenSequence layer_in = at_layer(seq, tr.hidden[l]);
      const ForwardResult full = forward_mha_gqa(cfg, model.layers[l], layer_in);
      for (int h = 0; h < cfg.n_heads; ++h) {
        for (int s = 0; s < map.n_subspaces; ++s) {
          const ForwardResult masked =
              forward_mha_gqa_masked(cfg, model.layers[l], layer_in, {s}, h);
          double mean_kl = 0.0;
          for (int t = 0; t < n; ++t) {
            const Vector p = full.attn[h].row(t).head(t + 1).transpose();
            const Vector q = masked.attn[h].row(t).head(t + 1).transpose();
            mean_kl += kl_divergence(p, q);
          }
          map.at(l, h, s) += mean_kl / n;
        }
      }
    }
  }
  for (double& v : map.scores) v /= static_cast<double>(calib.size());
  return map;
}

SensitivityMap score_with_strategy(const ToyModel& model,
                                   const std::vector<TokenSequence>& calib,
                                   SelectionStrategy strategy) {
  return strategy == SelectionStrategy::two_norm ? score_two_norm(model, calib)
                                                 : score_mkl(model, calib);
}

SubspaceSelection select_top_r(const SensitivityMap& map, const ModelConfig& cfg,
                               SelectionStrategy strategy) {
  const int r = cfg.d_rope / 2;
  const int n_sub = cfg.d_head / 2;
  if (r <= 0 || r > n_sub) throw std::invalid_argument("select_top_r: r out of range");
  if (map.n_layers != cfg.n_layers || map.n_heads != cfg.n_heads || map.n_subspaces != n_sub)
    throw std::invalid_argument("select_top_r: map/config mismatch");

  SubspaceSelection sel;
  sel.n_layers = cfg.n_layers;
  sel.n_kv_groups = cfg.n_kv_heads;
  sel.n_subspaces = n_sub;
  sel.r = r;
  sel.strategy = strategy;
  sel.retained.resize(cfg.n_layers);
  sel.permutation.resize(cfg.n_layers);

  const int gsz = cfg.group_size();
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      std::vector<double> group_score(n_sub, 0.0);
      for (int h = g * gsz; h < (g + 1) * gsz; ++h)
        for (int s = 0; s < n_sub; ++s) group_score[s] += map.at(l, h, s);
      for (double& v : group_score) v /= gsz;

      std::vector<int> order(n_sub);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return group_score[a] > group_score[b];  // ties keep the lower index
      });
      std::vector<int> retained(order.begin(), order.begin() + r);
      std::sort(retained.begin(), retained.end());

      std::vector<int> perm = retained;
      for (int s = 0; s < n_sub; ++s)
        if (!std::binary_search(retained.begin(), retained.end(), s)) perm.push_back(s);

      sel.retained[l].push_back(std::move(retained));
      sel.permutation[l].push_back(std::move(perm));
    }
  }
  return sel;
}

SubspaceSelection layer_view(const SubspaceSelection& sel, int layer) {
  SubspaceSelection v = sel;
  v.n_layers = 1;
  v.retained = {sel.retained.at(layer)};
  v.permutation = {sel.permutation.at(layer)};
  return v;
}

}  // namespace mlaforge
