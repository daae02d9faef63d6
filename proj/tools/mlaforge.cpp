// mlaforge — convert toy MHA/GQA attention stacks to MLA, analyze truncation
// losses, and account for KV-cache memory. Batch commands over
// manifest.json + tensors.bin checkpoints; see README.md.

#include "mlaforge/adapt.hpp"
#include "mlaforge/cachekit.hpp"
#include "mlaforge/checkpoint.hpp"
#include "mlaforge/convert.hpp"
#include "mlaforge/mdsvd.hpp"
#include "mlaforge/model.hpp"
#include "mlaforge/selection.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace {

using namespace mlaforge;

SelectionStrategy parse_strategy(const std::string& s) {
  if (s == "2norm") return SelectionStrategy::two_norm;
  if (s == "mkl") return SelectionStrategy::mkl;
  throw CLI::ValidationError("--strategy", "unknown strategy '" + s + "'");
}

struct Preset {
  const char* name;
  ModelConfig cfg;
};

// Head layouts of the reference models; d_rope defaults to d_head / 4 and
// d_latent is supplied on the command line.
const Preset kPresets[] = {
    {"llava-1.5", {32, 32, 32, 4096, 128, RopeKind::vanilla_1d, 10000.0, 32, 128}},
    {"llava-next", {32, 32, 8, 4096, 128, RopeKind::vanilla_1d, 10000.0, 32, 128}},
    {"qwen2.5-vl", {28, 28, 4, 3584, 128, RopeKind::mrope, 10000.0, 32, 128}},
};

ModelConfig preset_config(const std::string& name) {
  for (const auto& p : kPresets)
    if (name == p.name) return p.cfg;
  throw CLI::ValidationError("--preset", "unknown preset '" + name + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f << text;
}

std::string csv_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<SegmentSpec> build_layout(int text_tokens, const std::string& images_spec) {
  int n_images = 0, rows = 0, cols = 0;
  if (!images_spec.empty()) {
    if (std::sscanf(images_spec.c_str(), "%dx%dx%d", &n_images, &rows, &cols) != 3 ||
        n_images <= 0 || rows <= 0 || cols <= 0)
      throw CLI::ValidationError("--images", "expected KxHxW with positive integers");
  }
  // Interleave: split the text budget into n_images + 1 chunks around images.
  std::vector<SegmentSpec> layout;
  const int chunks = n_images + 1;
  int remaining = text_tokens;
  for (int i = 0; i < chunks; ++i) {
    const int take = remaining / (chunks - i);
    if (take > 0) layout.push_back(SegmentSpec::text(take));
    remaining -= take;
    if (i < n_images) layout.push_back(SegmentSpec::image(rows, cols));
  }
  return layout;
}

int cmd_gen_calib(const std::string& out, std::uint64_t seed, int d_model, int n_seqs,
                  int text_tokens, const std::string& images_spec) {
  const auto layout = build_layout(text_tokens, images_spec);
  if (layout.empty()) throw std::runtime_error("gen-calib: empty layout");
  ModelConfig cfg;
  cfg.d_model = d_model;
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> seqs;
  for (int s = 0; s < n_seqs; ++s) seqs.push_back(random_sequence(cfg, layout, rng));
  save_calibration(out, d_model, seqs);
  std::cout << "wrote " << n_seqs << " sequences to " << out << "\n";
  return 0;
}

int cmd_gen_model(const std::string& out, std::uint64_t seed, const ModelConfig& cfg) {
  save_checkpoint(out, random_toy_model(cfg, seed));
  std::cout << "wrote checkpoint to " << out << "\n";
  return 0;
}

std::string report_csv(const ConversionReport& report) {
  std::string csv = "layer,strategy,loss_visual,loss_text,retained\n";
  for (const auto& l : report.layers) {
    std::string retained;
    for (const auto& group : l.retained) {
      if (!retained.empty()) retained += ";";
      for (std::size_t i = 0; i < group.size(); ++i)
        retained += (i ? " " : "") + std::to_string(group[i]);
    }
    csv += std::to_string(l.layer) + "," +
           (l.strategy == SelectionStrategy::mkl ? "mkl" : "2norm") + "," +
           csv_double(l.loss_visual) + "," + csv_double(l.loss_text) + ",\"" + retained + "\"\n";
  }
  return csv;
}

int cmd_convert(const std::string& in, const std::string& calib_dir,
                const std::string& strategy, int d_rope, int d_latent, double ridge,
                const std::string& out, const std::string& report_dir) {
  Checkpoint ck = load_checkpoint(in);
  if (ck.kind != CheckpointKind::gqa)
    throw std::runtime_error("convert: input checkpoint is already MLA");
  if (d_rope > 0) ck.toy.cfg.d_rope = d_rope;
  if (d_latent > 0) ck.toy.cfg.d_latent = d_latent;
  ck.toy.cfg.validate();

  int d_model = 0;
  const auto calib = load_calibration(calib_dir, &d_model);
  if (d_model != ck.toy.cfg.d_model)
    throw std::runtime_error("convert: calibration d_model mismatch");

  ConvertOptions options;
  options.strategy = parse_strategy(strategy);
  options.ridge = ridge;
  const ConvertResult result = convert(ck.toy, calib, options);
  save_checkpoint(out, result.model);

  if (!report_dir.empty()) {
    std::filesystem::create_directories(report_dir);
    write_text(std::filesystem::path(report_dir) / "conversion.csv", report_csv(result.report));
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "cache elements/token: %lld -> %lld\nequivalence residual: %.9g\n",
                  static_cast<long long>(result.report.cache_elements_before),
                  static_cast<long long>(result.report.cache_elements_after),
                  result.report.equivalence_residual);
    write_text(std::filesystem::path(report_dir) / "conversion.txt", buf);
  }
  std::printf("converted %d layers, residual %.9g\n", ck.toy.cfg.n_layers,
              result.report.equivalence_residual);
  return 0;
}

double max_relative_residual(const ToyModel& orig, const MlaModel& mla,
                             const std::vector<TokenSequence>& calib) {
  double residual = 0.0;
  for (const auto& seq : calib) {
    const ToyModel::Trace ref = orig.forward(seq);
    KvCache cache = KvCache::empty(mla.cfg.n_layers);
    const MlaModel::Trace got = mla.forward(seq, cache);
    for (int t = 0; t < seq.n_tokens(); ++t) {
      const double denom = std::max(ref.hidden.back().col(t).norm(), 1e-30);
      residual = std::max(
          residual, (got.hidden.back().col(t) - ref.hidden.back().col(t)).norm() / denom);
    }
  }
  return residual;
}

int cmd_verify(const std::string& in, const std::string& orig, const std::string& calib_dir) {
  const Checkpoint converted = load_checkpoint(in);
  const Checkpoint original = load_checkpoint(orig);
  if (converted.kind != CheckpointKind::mla || original.kind != CheckpointKind::gqa)
    throw std::runtime_error("verify: expects --in MLA and --orig GQA checkpoints");
  const auto calib = load_calibration(calib_dir, nullptr);
  std::printf("residual %.9g\n", max_relative_residual(original.toy, converted.mla, calib));
  return 0;
}

int cmd_analyze(const std::string& in, const std::string& calib_dir, int rank,
                const std::string& out, double ridge) {
  const Checkpoint ck = load_checkpoint(in);
  if (ck.kind != CheckpointKind::gqa)
    throw std::runtime_error("analyze: expects a GQA checkpoint");
  const auto calib = load_calibration(calib_dir, nullptr);
  if (calib.empty()) throw std::runtime_error("analyze: empty calibration data");

  const ModelConfig& cfg = ck.cfg;
  std::vector<ToyModel::Trace> traces;
  for (const auto& seq : calib) traces.push_back(ck.toy.forward(seq));

  std::string csv = "layer,loss_joint,loss_visual,loss_text,ratio\n";
  for (int l = 0; l < cfg.n_layers; ++l) {
    std::vector<Vector> vis, txt;
    for (std::size_t s = 0; s < calib.size(); ++s)
      for (int t = 0; t < calib[s].n_tokens(); ++t)
        (calib[s].modality[t] == Modality::visual ? vis : txt)
            .push_back(traces[s].hidden[l].col(t));
    Matrix x_visual(cfg.d_model, vis.size()), x_text(cfg.d_model, txt.size());
    for (std::size_t i = 0; i < vis.size(); ++i) x_visual.col(i) = vis[i];
    for (std::size_t i = 0; i < txt.size(); ++i) x_text.col(i) = txt[i];

    Matrix stacked(2 * cfg.n_kv_heads * cfg.d_head, cfg.d_model);
    stacked << ck.toy.layers[l].w_k, ck.toy.layers[l].w_v;
    const LossReportEntry e = theorem1_report(stacked, x_visual, x_text, rank, ridge);
    char row[256];
    std::snprintf(row, sizeof(row), "%d,%s,%s,%s,%.6f\n", l, csv_double(e.loss_joint).c_str(),
                  csv_double(e.loss_visual).c_str(), csv_double(e.loss_text).c_str(), e.ratio);
    csv += row;
  }
  write_text(out, csv);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_select(const std::string& in, const std::string& calib_dir, const std::string& strategy,
               const std::string& out) {
  const Checkpoint ck = load_checkpoint(in);
  if (ck.kind != CheckpointKind::gqa) throw std::runtime_error("select: expects a GQA checkpoint");
  const auto calib = load_calibration(calib_dir, nullptr);
  const SensitivityMap map =
      score_with_strategy(ck.toy, calib, parse_strategy(strategy));
  std::string csv = "layer,head,k,score\n";
  for (int l = 0; l < map.n_layers; ++l)
    for (int h = 0; h < map.n_heads; ++h)
      for (int k = 0; k < map.n_subspaces; ++k)
        csv += std::to_string(l) + "," + std::to_string(h) + "," + std::to_string(k) + "," +
               csv_double(map.at(l, h, k)) + "\n";
  write_text(out, csv);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_account(const std::string& preset, int d_latent, int d_rope, const std::string& baseline,
                int bits) {
  ModelConfig cfg = preset_config(preset);
  if (d_latent > 0) cfg.d_latent = d_latent;
  if (d_rope > 0) cfg.d_rope = d_rope;
  const CacheBaseline b = baseline == "gqa" ? CacheBaseline::gqa : CacheBaseline::mha;
  const CacheBudget budget = account(cfg, b, bits);
  std::cout << format_reduction(budget) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MHA/GQA -> MLA conversion toolkit"};
  app.require_subcommand(1);

  // gen-calib
  auto* gen = app.add_subcommand("gen-calib", "generate synthetic calibration data");
  std::string out_dir, images_spec;
  std::uint64_t seed = 0;
  int d_model = 32, n_seqs = 32, text_tokens = 64;
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--seed", seed, "rng seed");
  gen->add_option("--d-model", d_model, "embedding width");
  gen->add_option("--seqs", n_seqs, "number of sequences");
  gen->add_option("--text", text_tokens, "text tokens per sequence");
  gen->add_option("--images", images_spec, "images per sequence as KxHxW");

  // gen-model
  auto* genm = app.add_subcommand("gen-model", "generate a random toy GQA checkpoint");
  std::string gm_out;
  std::uint64_t gm_seed = 0;
  ModelConfig gm_cfg{2, 4, 2, 32, 8, RopeKind::vanilla_1d, 10000.0, 4, 8};
  std::string gm_rope = "vanilla_1d";
  genm->add_option("--out", gm_out, "output directory")->required();
  genm->add_option("--seed", gm_seed, "rng seed");
  genm->add_option("--layers", gm_cfg.n_layers, "layer count");
  genm->add_option("--heads", gm_cfg.n_heads, "query head count");
  genm->add_option("--kv-heads", gm_cfg.n_kv_heads, "kv head count");
  genm->add_option("--d-model", gm_cfg.d_model, "model width");
  genm->add_option("--d-head", gm_cfg.d_head, "head width");
  genm->add_option("--d-rope", gm_cfg.d_rope, "default retained rope dims");
  genm->add_option("--d-latent", gm_cfg.d_latent, "default latent width");
  genm->add_option("--rope", gm_rope, "rope kind")
      ->check(CLI::IsMember({"vanilla_1d", "mrope"}));

  // convert
  auto* conv = app.add_subcommand("convert", "convert a GQA checkpoint to MLA");
  std::string cv_in, cv_calib, cv_strategy = "2norm", cv_out, cv_report;
  int cv_d_rope = 0, cv_d_latent = 0;
  double cv_ridge = 1e-6;
  std::uint64_t cv_seed = 0;
  conv->add_option("--in", cv_in, "input GQA checkpoint")->required();
  conv->add_option("--calib", cv_calib, "calibration directory")->required();
  conv->add_option("--strategy", cv_strategy, "subspace selection strategy")
      ->check(CLI::IsMember({"2norm", "mkl"}));
  conv->add_option("--d-rope", cv_d_rope, "retained rope dims per head");
  conv->add_option("--d-latent", cv_d_latent, "latent width per kv head");
  conv->add_option("--ridge", cv_ridge, "covariance ridge epsilon");
  conv->add_option("--out", cv_out, "output MLA checkpoint")->required();
  conv->add_option("--report", cv_report, "report directory");
  conv->add_option("--seed", cv_seed, "rng seed (conversion itself is deterministic)");

  // verify
  auto* ver = app.add_subcommand("verify", "compare an MLA checkpoint against its origin");
  std::string vf_in, vf_orig, vf_calib;
  ver->add_option("--in", vf_in, "MLA checkpoint")->required();
  ver->add_option("--orig", vf_orig, "original GQA checkpoint")->required();
  ver->add_option("--calib", vf_calib, "calibration directory")->required();

  // analyze
  auto* ana = app.add_subcommand("analyze", "per-layer joint-vs-split truncation losses");
  std::string an_in, an_calib, an_out = "losses.csv";
  int an_rank = 4;
  double an_ridge = 1e-6;
  ana->add_option("--in", an_in, "input GQA checkpoint")->required();
  ana->add_option("--calib", an_calib, "calibration directory")->required();
  ana->add_option("--rank", an_rank, "factorization rank");
  ana->add_option("--ridge", an_ridge, "covariance ridge epsilon");
  ana->add_option("--out", an_out, "output CSV path");

  // select
  auto* sel = app.add_subcommand("select", "emit the sensitivity map CSV");
  std::string sl_in, sl_calib, sl_strategy = "mkl", sl_out = "sensitivity.csv";
  sel->add_option("--in", sl_in, "input GQA checkpoint")->required();
  sel->add_option("--calib", sl_calib, "calibration directory")->required();
  sel->add_option("--strategy", sl_strategy, "scoring strategy")
      ->check(CLI::IsMember({"2norm", "mkl"}));
  sel->add_option("--out", sl_out, "output CSV path");

  // account
  auto* acc = app.add_subcommand("account", "KV-cache memory reduction for a preset");
  std::string ac_preset = "llava-next", ac_baseline = "mha";
  int ac_d_latent = 0, ac_d_rope = 0, ac_bits = 16;
  acc->add_option("--preset", ac_preset, "model preset")
      ->check(CLI::IsMember({"llava-1.5", "llava-next", "qwen2.5-vl"}));
  acc->add_option("--d-latent", ac_d_latent, "latent width per kv head");
  acc->add_option("--d-rope", ac_d_rope, "retained rope dims per head");
  acc->add_option("--baseline", ac_baseline, "cache baseline")
      ->check(CLI::IsMember({"mha", "gqa"}));
  acc->add_option("--bits", ac_bits, "cache storage bits")->check(CLI::IsMember({16, 4, 2}));

  try {
    app.parse(argc, argv);
    if (gen->parsed())
      return cmd_gen_calib(out_dir, seed, d_model, n_seqs, text_tokens, images_spec);
    if (genm->parsed()) {
      gm_cfg.rope_kind = gm_rope == "mrope" ? RopeKind::mrope : RopeKind::vanilla_1d;
      return cmd_gen_model(gm_out, gm_seed, gm_cfg);
    }
    if (conv->parsed())
      return cmd_convert(cv_in, cv_calib, cv_strategy, cv_d_rope, cv_d_latent, cv_ridge, cv_out,
                         cv_report);
    if (ver->parsed()) return cmd_verify(vf_in, vf_orig, vf_calib);
    if (ana->parsed()) return cmd_analyze(an_in, an_calib, an_rank, an_out, an_ridge);
    if (sel->parsed()) return cmd_select(sl_in, sl_calib, sl_strategy, sl_out);
    if (acc->parsed()) return cmd_account(ac_preset, ac_d_latent, ac_d_rope, ac_baseline, ac_bits);
    return 2;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
