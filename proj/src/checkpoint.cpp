#include "mlaforge/checkpoint.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace mlaforge {

namespace {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are defined little-endian");

struct BlobWriter {
  std::vector<char> bytes;
  json index = json::array();

  void add(const std::string& name, const Matrix& m) {
    const std::size_t offset = bytes.size();
    const std::size_t len = static_cast<std::size_t>(m.size()) * sizeof(float);
    bytes.resize(offset + len);
    float* out = reinterpret_cast<float*>(bytes.data() + offset);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) *out++ = static_cast<float>(m(i, j));
    index.push_back({{"name", name},
                     {"shape", {m.rows(), m.cols()}},
                     {"dtype", "f32"},
                     {"byte_offset", offset},
                     {"byte_length", len}});
  }
};

struct BlobReader {
  std::vector<char> bytes;
  const json* index = nullptr;

  Matrix get(const std::string& name) const {
    for (const auto& t : *index) {
      if (t.at("name") != name) continue;
      const std::size_t offset = t.at("byte_offset");
      const std::size_t len = t.at("byte_length");
      if (offset + len > bytes.size())
        throw std::runtime_error("checkpoint: tensor '" + name + "' exceeds blob");
      const Eigen::Index rows = t.at("shape")[0], cols = t.at("shape")[1];
      if (len != static_cast<std::size_t>(rows * cols) * sizeof(float))
        throw std::runtime_error("checkpoint: tensor '" + name + "' length mismatch");
      Matrix m(rows, cols);
      const float* in = reinterpret_cast<const float*>(bytes.data() + offset);
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<double>(*in++);
      return m;
    }
    throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
  }
};

void write_file(const std::filesystem::path& path, const char* data, std::size_t len) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  f.write(data, static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  const auto len = f.tellg();
  f.seekg(0);
  std::vector<char> bytes(static_cast<std::size_t>(len));
  f.read(bytes.data(), len);
  if (!f) throw std::runtime_error("read failed: " + path.string());
  return bytes;
}

json config_record(const ModelConfig& cfg) {
  return {{"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},
          {"n_kv_heads", cfg.n_kv_heads},
          {"d_model", cfg.d_model},
          {"d_head", cfg.d_head},
          {"rope_kind", cfg.rope_kind == RopeKind::mrope ? "mrope" : "vanilla_1d"},
          {"rope_base", cfg.rope_base},
          {"d_rope", cfg.d_rope},
          {"d_latent", cfg.d_latent}};
}

ModelConfig parse_config(const json& j) {
  ModelConfig cfg;
  cfg.n_layers = j.at("n_layers");
  cfg.n_heads = j.at("n_heads");
  cfg.n_kv_heads = j.at("n_kv_heads");
  cfg.d_model = j.at("d_model");
  cfg.d_head = j.at("d_head");
  cfg.rope_kind = j.at("rope_kind") == "mrope" ? RopeKind::mrope : RopeKind::vanilla_1d;
  cfg.rope_base = j.at("rope_base");
  cfg.d_rope = j.at("d_rope");
  cfg.d_latent = j.at("d_latent");
  return cfg;
}

void save_manifest_and_blob(const std::filesystem::path& dir, json manifest, BlobWriter& blob) {
  std::filesystem::create_directories(dir);
  manifest["tensors"] = std::move(blob.index);
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", text.data(), text.size());
  write_file(dir / "tensors.bin", blob.bytes.data(), blob.bytes.size());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const ToyModel& model) {
  BlobWriter blob;
  for (int l = 0; l < model.cfg.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    blob.add(p + "w_q", model.layers[l].w_q);
    blob.add(p + "w_k", model.layers[l].w_k);
    blob.add(p + "w_v", model.layers[l].w_v);
    blob.add(p + "w_o", model.layers[l].w_o);
  }
  json manifest = {{"format_version", kCheckpointFormatVersion},
                   {"kind", "gqa"},
                   {"rope_layout", "paired_even_odd"},
                   {"model", config_record(model.cfg)}};
  save_manifest_and_blob(dir, std::move(manifest), blob);
}

void save_checkpoint(const std::filesystem::path& dir, const MlaModel& model) {
  BlobWriter blob;
  json selection = json::array();
  for (int l = 0; l < model.cfg.n_layers; ++l) {
    const std::string p = "layer." + std::to_string(l) + ".";
    const MlaLayerWeights& w = model.layers[l];
    blob.add(p + "w_q", w.w_q);
    blob.add(p + "k_rope_rows", w.k_rope_rows);
    for (Modality m : kModalities)
      for (int g = 0; g < model.cfg.n_kv_heads; ++g) {
        const std::string suffix = std::string(modality_name(m)) + "." + std::to_string(g);
        blob.add(p + "w_down." + suffix, w.down(m, g));
        blob.add(p + "w_up." + suffix, w.up(m, g));
      }
    blob.add(p + "w_o", w.w_o);
    json groups = json::array();
    for (int g = 0; g < model.cfg.n_kv_heads; ++g)
      groups.push_back(w.selection.retained_of(0, g));
    selection.push_back(std::move(groups));
  }
  const char* strategy = model.layers.empty() ||
                                 model.layers[0].selection.strategy == SelectionStrategy::two_norm
                             ? "2norm"
                             : "mkl";
  json manifest = {{"format_version", kCheckpointFormatVersion},
                   {"kind", "mla"},
                   {"rope_layout", "paired_even_odd"},
                   {"model", config_record(model.cfg)},
                   {"selection", std::move(selection)},
                   {"selection_strategy", strategy},
                   {"modality_routing", {"visual", "text"}}};
  save_manifest_and_blob(dir, std::move(manifest), blob);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest_bytes = read_file(dir / "manifest.json");
  const json manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
  if (manifest.at("format_version") != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version");

  BlobReader blob;
  blob.bytes = read_file(dir / "tensors.bin");
  const json& index = manifest.at("tensors");
  blob.index = &index;

  Checkpoint ck;
  ck.cfg = parse_config(manifest.at("model"));
  ck.cfg.validate();
  const std::string kind = manifest.at("kind");
  if (kind == "gqa") {
    ck.kind = CheckpointKind::gqa;
    ck.toy.cfg = ck.cfg;
    for (int l = 0; l < ck.cfg.n_layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      AttentionWeights w;
      w.w_q = blob.get(p + "w_q");
      w.w_k = blob.get(p + "w_k");
      w.w_v = blob.get(p + "w_v");
      w.w_o = blob.get(p + "w_o");
      ck.toy.layers.push_back(std::move(w));
    }
  } else if (kind == "mla") {
    ck.kind = CheckpointKind::mla;
    ck.mla.cfg = ck.cfg;
    const json& selection = manifest.at("selection");
    const SelectionStrategy strategy = manifest.at("selection_strategy") == "mkl"
                                           ? SelectionStrategy::mkl
                                           : SelectionStrategy::two_norm;
    for (int l = 0; l < ck.cfg.n_layers; ++l) {
      const std::string p = "layer." + std::to_string(l) + ".";
      MlaLayerWeights w;
      w.w_q = blob.get(p + "w_q");
      w.k_rope_rows = blob.get(p + "k_rope_rows");
      for (Modality m : kModalities) {
        w.w_down[static_cast<int>(m)].resize(ck.cfg.n_kv_heads);
        w.w_up[static_cast<int>(m)].resize(ck.cfg.n_kv_heads);
        for (int g = 0; g < ck.cfg.n_kv_heads; ++g) {
          const std::string suffix = std::string(modality_name(m)) + "." + std::to_string(g);
          w.w_down[static_cast<int>(m)][g] = blob.get(p + "w_down." + suffix);
          w.w_up[static_cast<int>(m)][g] = blob.get(p + "w_up." + suffix);
        }
      }
      w.w_o = blob.get(p + "w_o");
      // Rebuild the single-layer selection view from the manifest lists.
      SubspaceSelection sel;
      sel.n_layers = 1;
      sel.n_kv_groups = ck.cfg.n_kv_heads;
      sel.n_subspaces = ck.cfg.d_head / 2;
      sel.r = ck.cfg.d_rope / 2;
      sel.strategy = strategy;
      sel.retained.resize(1);
      sel.permutation.resize(1);
      for (int g = 0; g < ck.cfg.n_kv_heads; ++g) {
        std::vector<int> retained = selection.at(l).at(g).get<std::vector<int>>();
        std::vector<int> perm = retained;
        for (int s = 0; s < sel.n_subspaces; ++s)
          if (std::find(retained.begin(), retained.end(), s) == retained.end())
            perm.push_back(s);
        sel.retained[0].push_back(std::move(retained));
        sel.permutation[0].push_back(std::move(perm));
      }
      w.selection = std::move(sel);
      ck.mla.layers.push_back(std::move(w));
    }
  } else {
    throw std::runtime_error("checkpoint: unknown kind '" + kind + "'");
  }
  return ck;
}

void save_calibration(const std::filesystem::path& dir, int d_model,
                      const std::vector<TokenSequence>& sequences) {
  std::filesystem::create_directories(dir);
  std::vector<char> bytes;
  json seqs = json::array();
  for (const auto& seq : sequences) {
    seq.validate(d_model);
    const std::size_t offset = bytes.size();
    const std::size_t len =
        static_cast<std::size_t>(seq.embeddings.size()) * sizeof(float);
    bytes.resize(offset + len);
    float* out = reinterpret_cast<float*>(bytes.data() + offset);
    for (Eigen::Index i = 0; i < seq.embeddings.rows(); ++i)
      for (Eigen::Index j = 0; j < seq.embeddings.cols(); ++j)
        *out++ = static_cast<float>(seq.embeddings(i, j));
    json mod = json::array(), pt = json::array(), ph = json::array(), pw = json::array();
    for (int t = 0; t < seq.n_tokens(); ++t) {
      mod.push_back(seq.modality[t] == Modality::visual ? "visual" : "text");
      pt.push_back(seq.positions[t].t);
      ph.push_back(seq.positions[t].h);
      pw.push_back(seq.positions[t].w);
    }
    seqs.push_back({{"n_tokens", seq.n_tokens()},
                    {"modality", std::move(mod)},
                    {"pos_t", std::move(pt)},
                    {"pos_h", std::move(ph)},
                    {"pos_w", std::move(pw)},
                    {"byte_offset", offset},
                    {"byte_length", len}});
  }
  const json manifest = {{"format_version", kCheckpointFormatVersion},
                         {"d_model", d_model},
                         {"dtype", "f32"},
                         {"sequences", std::move(seqs)}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "calib.json", text.data(), text.size());
  write_file(dir / "calib.bin", bytes.data(), bytes.size());
}

std::vector<TokenSequence> load_calibration(const std::filesystem::path& dir, int* d_model_out) {
  const auto manifest_bytes = read_file(dir / "calib.json");
  const json manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
  if (manifest.at("format_version") != kCheckpointFormatVersion)
    throw std::runtime_error("calibration: unsupported format version");
  const int d_model = manifest.at("d_model");
  if (d_model_out != nullptr) *d_model_out = d_model;
  const auto bytes = read_file(dir / "calib.bin");

  std::vector<TokenSequence> out;
  for (const auto& s : manifest.at("sequences")) {
    TokenSequence seq;
    const int n = s.at("n_tokens");
    const std::size_t offset = s.at("byte_offset");
    const std::size_t len = s.at("byte_length");
    if (offset + len > bytes.size() ||
        len != static_cast<std::size_t>(d_model) * n * sizeof(float))
      throw std::runtime_error("calibration: embedding blob bounds mismatch");
    seq.embeddings.resize(d_model, n);
    const float* in = reinterpret_cast<const float*>(bytes.data() + offset);
    for (int i = 0; i < d_model; ++i)
      for (int j = 0; j < n; ++j) seq.embeddings(i, j) = static_cast<double>(*in++);
    for (int t = 0; t < n; ++t) {
      seq.modality.push_back(s.at("modality").at(t) == "visual" ? Modality::visual
                                                                : Modality::text);
      seq.positions.push_back({s.at("pos_t").at(t).get<std::int64_t>(),
                               s.at("pos_h").at(t).get<std::int64_t>(),
                               s.at("pos_w").at(t).get<std::int64_t>()});
    }
    seq.validate(d_model);
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace mlaforge
