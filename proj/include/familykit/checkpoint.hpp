// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_CHECKPOINT_HPP
#define FAMILYKIT_CHECKPOINT_HPP

// Checkpoint directory layout:
//   manifest.json  format_version, seed, step, config, and a parameter table of
//                  {name, dtype "f32", shape, offset, length, trainable}
//   weights.bin    concatenated row-major little-endian binary32 blobs
// Optimizer moments, when saved, follow the parameters as "adam.m.{name}" and
// "adam.v.{name}" entries in a separate "optimizer" table.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "familykit/model.hpp"
#include "familykit/trainer.hpp"

namespace familykit {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  FamilialModel<float> model;
  std::int64_t step = 0;
  std::map<std::string, AdamMoments> moments;
};

void save_checkpoint(const std::filesystem::path& dir, const FamilialModel<float>& model, std::int64_t step = 0,
                     const std::map<std::string, AdamMoments>* moments = nullptr);

inline void save_checkpoint(const std::filesystem::path& dir, const TrainState& state) {
  save_checkpoint(dir, state.model, state.step, &state.moments);
}

/// Throws an integrity error on version, table or size mismatches.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// FNV-1a over the canonical parameter bytes, for "unchanged" checks.
std::string parameter_hash(const FamilialModel<float>& model, const std::string& name_prefix = {});

}  // namespace familykit

#endif  // FAMILYKIT_CHECKPOINT_HPP
