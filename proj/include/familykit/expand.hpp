// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_EXPAND_HPP
#define FAMILYKIT_EXPAND_HPP

// Block expansion of one exit branch. New blocks are appended after the
// branch's existing blocks with zeroed output projections (wo, w_down), so
// every new block maps h to h + 0 and the expanded branch starts out computing
// exactly what it computed before.

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "familykit/forward.hpp"
#include "familykit/model.hpp"
#include "familykit/trainer.hpp"

namespace familykit {

enum class InitMode { randomized, clone };

std::string to_string(InitMode mode);
InitMode init_mode_from_string(const std::string& s);

struct ExpansionSpec {
  int target_branch = 0;
  int n_new_blocks = 3;
  InitMode init_mode = InitMode::randomized;
  /// Index into the branch's block path (backbone layers, then branch blocks,
  /// then earlier expansion blocks). -1 selects the last block on the path.
  int clone_source = -1;
  double gaussian_std = 0.02;
  std::uint64_t seed = 0;

  void validate(const FamilyConfig& config) const;
};

struct ExpansionReport {
  /// Max |logit difference| against the input model, measured before training.
  double identity_deviation = 0.0;
  Index added_parameters = 0;
  int depth_before = 0;
  int depth_after = 0;
  std::vector<std::string> trainable;
  Index frozen_parameters = 0;
};

struct Expanded {
  FamilialModel<float> model;
  ExpansionReport report;
};

/// Number of blocks a token passes through on its way to `branch`'s head.
int branch_depth(const FamilyConfig& config, int branch);

/// Appends spec.n_new_blocks blocks to the target branch and freezes every
/// parameter except the new blocks and that branch's lm_proj. The identity
/// deviation is measured on `probe`, or on a seeded random batch when null.
Expanded expand(const FamilialModel<float>& model, const ExpansionSpec& spec, const TokenBatch* probe = nullptr);

/// Max |logit difference| between the two models over all exits.
double verify_identity(const FamilialModel<float>& base, const FamilialModel<float>& expanded, const TokenBatch& probe);

struct CosineMap {
  std::vector<std::string> blocks;  // one per block on the branch path
  MatrixD scores;                   // blocks x tokens
  bool degenerate = false;          // a zero-norm hidden vector was seen
};

/// Row-wise cos(in, out). Zero-norm rows score 0 and set *degenerate.
std::vector<double> cosine_scores(const MatrixF& in, const MatrixF& out, bool* degenerate = nullptr);

/// cos(h_in, h_out) of every block on `branch`'s path, for each token of `text`.
CosineMap layer_cosine_similarity(const FamilialModel<float>& model, const std::vector<TokenId>& text, int branch);

/// `layer,token_index,token_text,cosine` rows.
void write_cosine_csv(std::ostream& out, const CosineMap& map, const std::vector<TokenId>& text);

struct AblationResult {
  std::vector<double> randomized;  // target-branch loss per step
  std::vector<double> clone;
};

/// Expands `model` twice, once per init mode, and trains both arms for
/// config.total_steps under identical data order and schedule. Rows go to
/// `metrics` with an `arm` column when it is non-null.
AblationResult ablation_run(const FamilialModel<float>& model, const std::vector<TokenId>& corpus,
                            ExpansionSpec spec, const TrainConfig& config, std::uint64_t data_seed,
                            MetricsWriter* metrics = nullptr);

/// Training state for an expanded model: only the target branch's loss counts.
LambdaSchedule expansion_schedule(const FamilyConfig& config, int target_branch, std::int64_t total_steps);

}  // namespace familykit

#endif  // FAMILYKIT_EXPAND_HPP
