// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_PIPELINE_HPP
#define FAMILYKIT_PIPELINE_HPP

// Command implementations behind the `familykit` executable. Every command
// reads its inputs from a RunConfig, writes its artifacts under paths.out and
// reports progress to `log`.
//
//   train     checkpoint/, metrics.csv
//   expand    checkpoint/, metrics.csv, expansion_report.json [, ablation.csv]
//   compress  checkpoint/, plan.json, compression_report.csv, compression_report.txt
//   eval      perplexity.csv
//   generate  generation.txt, trace.jsonl
//   analyze   cosine.csv
//   export    checkpoint/

#include <ostream>
#include <string>
#include <vector>

#include "familykit/compress.hpp"
#include "familykit/eval.hpp"
#include "familykit/expand.hpp"
#include "familykit/infer.hpp"
#include "familykit/run_config.hpp"

namespace familykit {

struct TrainOutcome {
  std::int64_t step = 0;
  /// Loss of each exit at the last step run by this invocation.
  std::vector<double> final_loss;
  double unigram_entropy = 0.0;
};

struct CompressOutcome {
  CompressionPlan plan;
  CompressionReport report;
};

/// Joint training from scratch, or resumed from paths.checkpoint. A resumed run
/// appends to an existing metrics.csv in paths.out.
TrainOutcome cmd_train(const RunConfig& rc, std::ostream& log);
ExpansionReport cmd_expand(const RunConfig& rc, std::ostream& log);
/// Throws a numeric error, after writing every artifact, when the achieved
/// removal misses the target ratio by more than compression.tolerance.
CompressOutcome cmd_compress(const RunConfig& rc, std::ostream& log);
std::vector<Perplexity> cmd_eval(const RunConfig& rc, std::ostream& log);
GenerationTrace cmd_generate(const RunConfig& rc, std::ostream& log);
CosineMap cmd_analyze(const RunConfig& rc, std::ostream& log);
void cmd_export(const RunConfig& rc, std::ostream& log);

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"train", "expand", "compress", "eval", "generate", "analyze", "export"};
  return names;
}

/// Runs `command` and maps errors to exit codes: 0 ok, 2 config, 3 data,
/// 4 numeric or divergence, 5 integrity.
int run_command(const std::string& command, const RunConfig& rc, std::ostream& log, std::ostream& err);

/// Throws an integrity error naming both fingerprints when the checkpoint's
/// architecture differs from the configured one. Expansion counts are ignored.
void check_compatible(const RunConfig& rc, const FamilyConfig& checkpoint);

}  // namespace familykit

#endif  // FAMILYKIT_PIPELINE_HPP
