// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_INFER_HPP
#define FAMILYKIT_INFER_HPP

// Early-exit autoregressive decoding.
//
// Each new token evaluates the allowed exits from shallow to deep and is
// emitted at the first exit whose max softmax probability reaches the
// threshold, or at the final exit otherwise. Layers are run per position at
// most once. When a later token needs a layer that an earlier position never
// reached, that layer is backfilled for the earlier positions first, so every
// cached key and value equals what a full-prefix forward pass computes.

#include <cstdint>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "familykit/forward.hpp"
#include "familykit/model.hpp"

namespace familykit {

enum class DecodeMode { greedy, sample };
enum class Backfill { lazy, always };

std::string to_string(DecodeMode mode);
DecodeMode decode_mode_from_string(const std::string& s);
std::string to_string(Backfill mode);
Backfill backfill_from_string(const std::string& s);

struct ExitPolicy {
  /// Emit once confidence >= threshold. Values above 1 always reach the final exit.
  double threshold = 0.5;
  /// Exits that may emit, any order; empty selects every exit.
  std::vector<int> allowed;
  DecodeMode mode = DecodeMode::greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  /// `always` runs every backbone layer and every allowed head for each
  /// position as soon as it is appended.
  Backfill backfill = Backfill::lazy;

  void validate(const FamilyConfig& config) const;
  /// Allowed exits sorted by tap depth.
  std::vector<int> resolved(const FamilyConfig& config) const;
};

/// Max softmax probability of a logits row. Non-finite input is an input error.
double confidence(std::span<const float> logits);

/// Index of the largest entry; ties go to the lowest index.
TokenId argmax_lowest(std::span<const float> logits);

struct TokenRecord {
  Index step = 0;      // index among generated tokens
  Index position = 0;  // absolute position in the context
  TokenId token = 0;
  int exit = 0;
  /// Backbone depth at which the emitting exit taps the residual stream.
  int exit_depth = 0;
  /// Confidence at every evaluated exit, shallow first.
  std::vector<double> confidences;
  /// Blocks run for this token's own position while choosing it.
  Index backbone_runs = 0;
  Index head_runs = 0;
};

struct GenerationTrace {
  std::vector<TokenId> prompt;
  std::vector<TokenRecord> records;
  /// max_new was cut short by the context length.
  bool truncated = false;
  /// Blocks run for earlier positions on behalf of later ones.
  Index backfill_runs = 0;
  Index total_runs = 0;

  std::vector<TokenId> tokens() const;
};

/// Incremental decoder with per-block key/value caches.
class DecodeSession {
 public:
  DecodeSession(const FamilialModel<float>& model, ExitPolicy policy);

  /// Appends a token at the next position without computing anything.
  void append(TokenId token);
  Index length() const { return static_cast<Index>(tokens_.size()); }

  /// Logits of `exit` at the last position.
  MatrixF logits(int exit);

  /// Chooses, records and appends the next token.
  TokenRecord next();

  /// Blocks of each stage run so far, summed.
  Index total_runs() const { return total_runs_; }
  Index backfill_runs() const { return backfill_runs_; }

 private:
  struct Stage {
    const BlockWeights<float>* weights = nullptr;
    int input = -1;  // stage feeding this one; -1 is the embedding
    bool backbone = true;
    MatrixF out;
    MatrixF k;
    MatrixF v;
    Index done = 0;  // positions [0, done) are computed
  };

  void ensure(int stage, Index n);
  void run(Stage& s, Index from, Index to);
  MatrixF input_rows(int stage, Index from, Index to) const;
  void backfill_all();

  const FamilialModel<float>& model_;
  ExitPolicy policy_;
  std::vector<int> order_;
  std::vector<Stage> stages_;
  std::vector<int> tap_;  // per exit: stage whose output feeds the final norm
  std::vector<TokenId> tokens_;
  Index total_runs_ = 0;
  Index backfill_runs_ = 0;
  Index own_backbone_ = 0;
  Index own_head_ = 0;
  Index steps_ = 0;
};

/// Generates up to max_new tokens after `prompt`.
GenerationTrace generate(const FamilialModel<float>& model, std::span<const TokenId> prompt, const ExitPolicy& policy,
                         Index max_new);

/// Reference greedy decoder that recomputes the full prefix through
/// forward_branch at every step.
std::vector<TokenId> greedy_decode(const FamilialModel<float>& model, std::span<const TokenId> prompt, int branch,
                                   Index max_new);

struct ExitHistogram {
  std::map<int, Index> counts;  // exit depth -> tokens
  Index tokens = 0;
  double mean_depth = 0.0;
};

ExitHistogram exit_histogram(const GenerationTrace& trace);

/// One `{step, token_id, exit_depth, confidences}` object per line.
void write_trace_jsonl(std::ostream& out, const GenerationTrace& trace);

}  // namespace familykit

#endif  // FAMILYKIT_INFER_HPP
