#pragma once

#include "mlaforge/model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mlaforge {

/// Checkpoint directory layout: manifest.json + tensors.bin. Tensors are
/// little-endian f32, row-major, written in canonical order so that
/// write -> read -> write is byte-identical. Names follow
/// layer.{i}.{w_q|w_k|w_v|w_o|k_rope_rows|w_down.{visual|text}.{g}|w_up.{visual|text}.{g}}.
inline constexpr int kCheckpointFormatVersion = 1;

enum class CheckpointKind { gqa, mla };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::gqa;
  ModelConfig cfg;
  ToyModel toy;  // valid when kind == gqa
  MlaModel mla;  // valid when kind == mla
};

void save_checkpoint(const std::filesystem::path& dir, const ToyModel& model);
void save_checkpoint(const std::filesystem::path& dir, const MlaModel& model);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Calibration data: calib.json + calib.bin carrying per-sequence embeddings,
/// modality tags and (t, h, w) position triples.
void save_calibration(const std::filesystem::path& dir, int d_model,
                      const std::vector<TokenSequence>& sequences);
std::vector<TokenSequence> load_calibration(const std::filesystem::path& dir, int* d_model);

}  // namespace mlaforge
