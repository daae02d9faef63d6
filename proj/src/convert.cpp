#include "mlaforge/convert.hpp"

#include "mlaforge/cachekit.hpp"

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>

namespace mlaforge {

int worker_count() {
  if (const char* env = std::getenv("MLAFORGE_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

namespace {

void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

Matrix permute_head_rows(const Matrix& w, int head, int d_head, const std::vector<int>& perm) {
  Matrix out(d_head, w.cols());
  for (std::size_t j = 0; j < perm.size(); ++j)
    out.middleRows(2 * static_cast<Eigen::Index>(j), 2) =
        w.middleRows(head * d_head + 2 * perm[j], 2);
  return out;
}

}  // namespace

MlaLayerWeights convert_layer(const ModelConfig& cfg, const AttentionWeights& w,
                              const SubspaceSelection& layer_selection, const Matrix& x_visual,
                              const Matrix& x_text, double ridge, LayerConversionReport* report) {
  const int r = cfg.d_rope / 2;
  MlaLayerWeights mla;
  mla.selection = layer_selection;
  mla.w_o = w.w_o;

  mla.w_q.resize(cfg.n_heads * cfg.d_head, cfg.d_model);
  for (int h = 0; h < cfg.n_heads; ++h) {
    const auto& perm = layer_selection.permutation_of(0, cfg.kv_group_of_head(h));
    mla.w_q.middleRows(h * cfg.d_head, cfg.d_head) = permute_head_rows(w.w_q, h, cfg.d_head, perm);
  }

  mla.k_rope_rows.resize(cfg.n_kv_heads * cfg.d_rope, cfg.d_model);
  for (auto& per_mod : mla.w_down) per_mod.resize(cfg.n_kv_heads);
  for (auto& per_mod : mla.w_up) per_mod.resize(cfg.n_kv_heads);

  for (int g = 0; g < cfg.n_kv_heads; ++g) {
    const auto& perm = layer_selection.permutation_of(0, g);
    // Retained rotary rows of the original w_k, copied unchanged.
    for (int j = 0; j < r; ++j)
      mla.k_rope_rows.middleRows(g * cfg.d_rope + 2 * j, 2) =
          w.w_k.middleRows(g * cfg.d_head + 2 * perm[j], 2);

    // Stacked [k_nope; v] of this kv head, k_nope rows first.
    Matrix stacked(cfg.d_kv_joint(), cfg.d_model);
    for (int j = r; j < cfg.d_head / 2; ++j)
      stacked.middleRows(2 * (j - r), 2) = w.w_k.middleRows(g * cfg.d_head + 2 * perm[j], 2);
    stacked.bottomRows(cfg.d_head) = w.w_v.middleRows(g * cfg.d_head, cfg.d_head);

    const MdSvdResult f = md_svd(stacked, x_visual, x_text, cfg.d_latent, cfg.d_latent, ridge);
    mla.w_down[static_cast<int>(Modality::visual)][g] = f.visual.w_down;
    mla.w_up[static_cast<int>(Modality::visual)][g] = f.visual.w_up;
    mla.w_down[static_cast<int>(Modality::text)][g] = f.text.w_down;
    mla.w_up[static_cast<int>(Modality::text)][g] = f.text.w_up;
    if (report != nullptr) {
      report->loss_visual += f.visual.loss_sq;
      report->loss_text += f.text.loss_sq;
      report->retained.push_back(layer_selection.retained_of(0, g));
    }
  }
  return mla;
}

ConvertResult convert(const ToyModel& teacher, const std::vector<TokenSequence>& calib,
                      const ConvertOptions& options) {
  const ModelConfig& cfg = teacher.cfg;
  cfg.validate();
  if (calib.empty()) throw std::invalid_argument("convert: empty calibration batch");

  // Teacher-forced activation capture: hidden states of the original model.
  std::vector<ToyModel::Trace> traces;
  traces.reserve(calib.size());
  std::size_t n_visual = 0, n_text = 0;
  for (const auto& seq : calib) {
    traces.push_back(teacher.forward(seq));
    for (Modality m : seq.modality) (m == Modality::visual ? n_visual : n_text) += 1;
  }
  std::vector<Matrix> x_visual(cfg.n_layers), x_text(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    x_visual[l].resize(cfg.d_model, n_visual);
    x_text[l].resize(cfg.d_model, n_text);
    Eigen::Index cv = 0, ct = 0;
    for (std::size_t s = 0; s < calib.size(); ++s)
      for (int t = 0; t < calib[s].n_tokens(); ++t) {
        if (calib[s].modality[t] == Modality::visual)
          x_visual[l].col(cv++) = traces[s].hidden[l].col(t);
        else
          x_text[l].col(ct++) = traces[s].hidden[l].col(t);
      }
  }

  const SensitivityMap map = score_with_strategy(teacher, calib, options.strategy);
  const SubspaceSelection selection = select_top_r(map, cfg, options.strategy);

  ConvertResult result;
  result.model.cfg = cfg;
  result.model.layers.resize(cfg.n_layers);
  result.report.layers.resize(cfg.n_layers);

  parallel_for(cfg.n_layers, [&](int l) {
    LayerConversionReport& rep = result.report.layers[l];
    rep.layer = l;
    rep.strategy = options.strategy;
    result.model.layers[l] = convert_layer(cfg, teacher.layers[l], layer_view(selection, l),
                                           x_visual[l], x_text[l], options.ridge, &rep);
  });

  const CacheBaseline baseline =
      cfg.n_kv_heads == cfg.n_heads ? CacheBaseline::mha : CacheBaseline::gqa;
  result.report.cache_elements_before = account(cfg, baseline, 16).baseline_elements;
  result.report.cache_elements_after = account(cfg, baseline, 16).per_token_elements;

  // Max relative per-token output difference between converted and original.
  double residual = 0.0;
  for (std::size_t s = 0; s < calib.size(); ++s) {
    KvCache cache = KvCache::empty(cfg.n_layers);
    const MlaModel::Trace mt = result.model.forward(calib[s], cache);
    const Matrix& ref = traces[s].hidden.back();
    const Matrix& got = mt.hidden.back();
    for (int t = 0; t < calib[s].n_tokens(); ++t) {
      const double denom = std::max(ref.col(t).norm(), 1e-30);
      residual = std::max(residual, (got.col(t) - ref.col(t)).norm() / denom);
    }
  }
  result.report.equivalence_residual = residual;
  return result;
}

}  // namespace mlaforge
