// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_RUN_CONFIG_HPP
#define FAMILYKIT_RUN_CONFIG_HPP

// Run configuration: one JSON document, optionally patched by dotted-path
// overrides such as `train.peak_lr=3e-4`. Unknown keys are rejected at every
// level.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "familykit/compress.hpp"
#include "familykit/config.hpp"
#include "familykit/expand.hpp"
#include "familykit/infer.hpp"
#include "familykit/json_io.hpp"
#include "familykit/trainer.hpp"

namespace familykit {

struct ExpansionSettings {
  ExpansionSpec spec;
  bool seed_given = false;
  TrainConfig train;
  /// Also train one arm per init mode and write both loss traces.
  bool ablate = false;
};

struct CompressionSettings {
  CompressionOptions options;
  /// Calibration windows: `batches` batches of `batch` x `seq_len` tokens,
  /// 64 windows of 64 tokens by default.
  Index batches = 8;
  Index batch = 8;
  Index seq_len = 64;
  /// "expanded" (expanded blocks and their heads) or "all" (every block matrix
  /// and every lm_proj).
  std::string scope = "expanded";
  /// Largest accepted |achieved removal - ratio|.
  double tolerance = 0.02;
};

struct GenerateSettings {
  ExitPolicy policy;
  bool seed_given = false;
  Index max_new = 64;
  std::string prompt = "The";
};

struct EvalSettings {
  Index window = 64;
  Index batch = 8;
};

struct AnalyzeSettings {
  int branch = 0;
  std::string text = "A fox sat on a box";
};

struct Paths {
  std::filesystem::path corpus;
  std::filesystem::path eval_corpus;
  std::filesystem::path calibration;
  std::filesystem::path checkpoint;
  std::filesystem::path text;
  std::filesystem::path out;
};

struct RunConfig {
  std::uint64_t seed = 0;
  FamilyConfig model;
  /// The document had a "model" section; checkpoints are checked against it.
  bool model_given = false;
  TrainConfig train;
  std::optional<LambdaSchedule> lambda;
  ExpansionSettings expansion;
  CompressionSettings compression;
  GenerateSettings generate;
  EvalSettings eval;
  AnalyzeSettings analyze;
  int export_branch = 0;
  Paths paths;

  /// Lambda schedule for joint training, defaulting to the decaying one.
  LambdaSchedule lambda_schedule() const;
};

/// Sets `doc[a][b]...` for the dotted `path`. The value is parsed as JSON and
/// falls back to a plain string when it is not valid JSON.
void apply_override(json& doc, const std::string& path, const std::string& value);

/// Parses `key=value` or splits `--key value` style arguments into overrides.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args);

/// Builds a RunConfig from `doc`. The seed comes from doc["seed"], then
/// `env_seed` (the FAMILYKIT_SEED value, may be null); neither is a config error.
RunConfig parse_run_config(const json& doc, const char* env_seed);

/// Reads a JSON document; a missing or malformed file is a config error.
json read_config_file(const std::filesystem::path& path);

void to_json(json& j, const TrainConfig& c);
void from_json(const json& j, TrainConfig& c);

}  // namespace familykit

#endif  // FAMILYKIT_RUN_CONFIG_HPP
