#include "mlaforge/selection.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace mlaforge;

namespace {

ModelConfig one_layer_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 4;
  cfg.n_kv_heads = 2;
  cfg.d_model = 16;
  cfg.d_head = 8;
  cfg.d_rope = 4;
  cfg.d_latent = 8;
  return cfg;
}

std::vector<TokenSequence> make_calib(const ModelConfig& cfg, int n_seqs, int len,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> out;
  for (int i = 0; i < n_seqs; ++i)
    out.push_back(random_sequence(cfg, {SegmentSpec::text(len)}, rng));
  return out;
}

/// Scale the [2k, 2k+1] rows of every head slice of a projection by `factor`.
void boost_subspace(Matrix& w, int d_head, int k, double factor) {
  for (int h = 0; h * d_head < w.rows(); ++h)
    w.middleRows(h * d_head + 2 * k, 2) *= factor;
}

}  // namespace

TEST_CASE("all-zero weights score zero everywhere") {
  const ModelConfig cfg = one_layer_cfg();
  ToyModel model = random_toy_model(cfg, 1);
  model.layers[0].w_q.setZero();
  model.layers[0].w_k.setZero();
  const SensitivityMap map = score_two_norm(model, make_calib(cfg, 2, 6, 2));
  for (double s : map.scores) CHECK(s == 0.0);
}

TEST_CASE("two-norm score of a single token matches hand-computed chunk norms") {
  ModelConfig cfg = one_layer_cfg();
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  cfg.d_head = 4;
  cfg.d_rope = 2;
  cfg.d_latent = 4;
  const ToyModel model = random_toy_model(cfg, 3);
  auto calib = make_calib(cfg, 1, 1, 4);
  const SensitivityMap map = score_two_norm(model, calib);

  const Vector x = calib[0].embeddings.col(0);
  const Vector q = model.layers[0].w_q * x;
  const Vector k = model.layers[0].w_k * x;
  for (int s = 0; s < 2; ++s) {
    const double expect = q.segment(2 * s, 2).norm() * k.segment(2 * s, 2).norm();
    CHECK(map.at(0, 0, s) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("a planted high-energy subspace ranks first in every head") {
  const ModelConfig cfg = one_layer_cfg();
  ToyModel model = random_toy_model(cfg, 5);
  const int planted = 2;
  boost_subspace(model.layers[0].w_q, cfg.d_head, planted, 10.0);
  boost_subspace(model.layers[0].w_k, cfg.d_head, planted, 10.0);
  const SensitivityMap map = score_two_norm(model, make_calib(cfg, 8, 12, 6));
  for (int h = 0; h < cfg.n_heads; ++h)
    for (int k = 0; k < map.n_subspaces; ++k)
      if (k != planted) CHECK(map.at(0, h, planted) > map.at(0, h, k));
}

TEST_CASE("mkl score of a dead subspace is exactly zero") {
  const ModelConfig cfg = one_layer_cfg();
  ToyModel model = random_toy_model(cfg, 7);
  const int dead = 1;
  boost_subspace(model.layers[0].w_q, cfg.d_head, dead, 0.0);
  boost_subspace(model.layers[0].w_k, cfg.d_head, dead, 0.0);
  const SensitivityMap map = score_mkl(model, make_calib(cfg, 2, 6, 8));
  for (int h = 0; h < cfg.n_heads; ++h) {
    CHECK(map.at(0, h, dead) == 0.0);
    for (int k = 0; k < map.n_subspaces; ++k) CHECK(map.at(0, h, k) >= 0.0);
  }
}

TEST_CASE("uniform attention is insensitive to any ablation") {
  const ModelConfig cfg = one_layer_cfg();
  ToyModel model = random_toy_model(cfg, 9);
  model.layers[0].w_q.setZero();  // all scores 0 -> uniform rows, masked or not
  const SensitivityMap map = score_mkl(model, make_calib(cfg, 2, 6, 10));
  for (double s : map.scores) CHECK(s == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("select_top_r on explicit score vectors") {
  ModelConfig cfg = one_layer_cfg();
  cfg.n_heads = 1;
  cfg.n_kv_heads = 1;
  SensitivityMap map;
  map.n_layers = 1;
  map.n_heads = 1;
  map.n_subspaces = 4;
  map.scores = {3, 1, 2, 0};
  const SubspaceSelection sel = select_top_r(map, cfg, SelectionStrategy::two_norm);
  CHECK(sel.retained_of(0, 0) == std::vector<int>{0, 2});
  CHECK(sel.permutation_of(0, 0) == std::vector<int>{0, 2, 1, 3});

  map.scores = {1, 1, 1, 1};  // ties break toward the lower index
  CHECK(select_top_r(map, cfg, SelectionStrategy::two_norm).retained_of(0, 0) ==
        std::vector<int>{0, 1});

  ModelConfig all = cfg;
  all.d_rope = all.d_head;  // r = d_head / 2 keeps everything
  map.scores = {0, 5, 0, 5};
  CHECK(select_top_r(map, all, SelectionStrategy::two_norm).retained_of(0, 0) ==
        std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("group aggregation averages head scores within a kv group") {
  ModelConfig cfg = one_layer_cfg();  // 4 heads, 2 groups of 2
  SensitivityMap map;
  map.n_layers = 1;
  map.n_heads = 4;
  map.n_subspaces = 4;
  map.scores.assign(16, 0.0);
  // group 0: head 0 favors subspace 1 strongly, head 1 favors subspace 3 weakly
  map.at(0, 0, 1) = 10.0;
  map.at(0, 1, 3) = 2.0;
  // group 1: agreement on subspace 2
  map.at(0, 2, 2) = 4.0;
  map.at(0, 3, 2) = 4.0;
  map.at(0, 3, 0) = 1.0;
  const SubspaceSelection sel = select_top_r(map, cfg, SelectionStrategy::mkl);
  CHECK(sel.retained_of(0, 0) == std::vector<int>{1, 3});  // means 5 and 1
  CHECK(sel.retained_of(0, 1) == std::vector<int>{0, 2});  // means 0.5 and 4
  CHECK(sel.strategy == SelectionStrategy::mkl);
}

TEST_CASE("scaling w_q scales two-norm scores but not the selected sets") {
  const ModelConfig cfg = one_layer_cfg();
  ToyModel model = random_toy_model(cfg, 11);
  const auto calib = make_calib(cfg, 4, 10, 12);
  const SensitivityMap base = score_two_norm(model, calib);
  const SubspaceSelection sel_base = select_top_r(base, cfg, SelectionStrategy::two_norm);

  model.layers[0].w_q *= 10.0;
  const SensitivityMap scaled = score_two_norm(model, calib);
  const SubspaceSelection sel_scaled = select_top_r(scaled, cfg, SelectionStrategy::two_norm);
  for (std::size_t i = 0; i < base.scores.size(); ++i)
    CHECK(scaled.scores[i] == doctest::Approx(10.0 * base.scores[i]).epsilon(1e-9));
  CHECK(sel_base.retained == sel_scaled.retained);
  CHECK(sel_base.permutation == sel_scaled.permutation);
}

TEST_CASE("selection is deterministic for fixed calibration data") {
  const ModelConfig cfg = one_layer_cfg();
  const ToyModel model = random_toy_model(cfg, 13);
  const auto calib = make_calib(cfg, 4, 8, 14);
  for (auto strat : {SelectionStrategy::two_norm, SelectionStrategy::mkl}) {
    const SensitivityMap a = score_with_strategy(model, calib, strat);
    const SensitivityMap b = score_with_strategy(model, calib, strat);
    CHECK(a.scores == b.scores);
    const SubspaceSelection sa = select_top_r(a, cfg, strat);
    const SubspaceSelection sb = select_top_r(b, cfg, strat);
    CHECK(sa.retained == sb.retained);
  }
}

TEST_CASE("both strategies return r indices per group and reject empty batches") {
  const ModelConfig cfg = one_layer_cfg();
  const ToyModel model = random_toy_model(cfg, 15);
  CHECK_THROWS_AS(score_two_norm(model, {}), std::invalid_argument);
  const auto calib = make_calib(cfg, 2, 6, 16);
  for (auto strat : {SelectionStrategy::two_norm, SelectionStrategy::mkl}) {
    const SubspaceSelection sel =
        select_top_r(score_with_strategy(model, calib, strat), cfg, strat);
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      const auto& retained = sel.retained_of(0, g);
      CHECK(static_cast<int>(retained.size()) == cfg.d_rope / 2);
      for (std::size_t i = 0; i + 1 < retained.size(); ++i)
        CHECK(retained[i] < retained[i + 1]);
    }
  }
}
