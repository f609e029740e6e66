// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_COMPRESS_HPP
#define FAMILYKIT_COMPRESS_HPP

// Activation-whitened low-rank compression.
//
// For a weight W (out x in) with calibration inputs X (in x n), the Gram
// G = X X^T is factored as G = F F^T. The SVD of W F gives U S V, and the
// rank-r replacement is
//
//   W' = U[:, :r] S[:r] V[:r, :] F^-1,
//
// which minimises ||W X - W' X||_F over rank-r matrices. It is stored as
// A = U[:, :r] sqrt(S[:r]) and B = sqrt(S[:r]) V[:r, :] F^-1.
//
// Per-matrix removal ratios inside a group follow
//
//   ratio_i = Len(G) * R * s_i / sum_G(s),   s_i = 1 / ln(max(L_i, 1 + 1e-6)),
//
// where L_i is the truncation loss of matrix i at the uniform-R rank.

#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "familykit/forward.hpp"
#include "familykit/model.hpp"

namespace familykit {

/// Running sum of x x^T over calibration rows, in binary64.
struct GramStat {
  MatrixD gram;
  Index samples = 0;

  /// Adds every row of `rows` (samples x features) as one sample.
  void add(const MatrixF& rows);
};

struct CalibrationSet {
  std::map<std::string, GramStat> grams;  // keyed by dense matrix name
};

using MatrixPredicate = std::function<bool(const std::string&)>;

/// Gram statistics of the inputs of every linear selected by `scope`,
/// accumulated over forward passes of `batches` in order.
CalibrationSet capture_activations(const FamilialModel<float>& model, std::span<const TokenBatch> batches,
                                   const MatrixPredicate& scope);

/// Expanded blocks of every exit plus the lm_proj of each exit that has them.
bool in_expanded_scope(const FamilyConfig& config, const std::string& matrix);

enum class WhiteningPath { cholesky, svd };

struct Whitening {
  WhiteningPath path = WhiteningPath::svd;
  MatrixD factor;   // F with F F^T = G (+ ridge)
  MatrixD inverse;  // F^-1
  /// Populated on the SVD path: G = U_s diag(S_s) U_s^T, sqrt_s = sqrt(S_s).
  MatrixD us;
  Eigen::VectorXd sqrt_s;
  /// Cholesky was requested but the Gram was not positive definite.
  bool fell_back = false;
};

/// Whitening factor of `gram` after adding ridge_rel * trace / dim to the
/// diagonal. Cholesky is tried first unless `prefer_cholesky` is false; the SVD
/// path clamps singular values below 1e-8 * max before inversion.
Whitening whiten(const MatrixD& gram, double ridge_rel = 0.0, bool prefer_cholesky = true);

struct Factors {
  MatrixF a;  // out x r
  MatrixF b;  // r x in
  Eigen::VectorXd singular;  // all singular values of W F
};

/// Rank that makes (out + in) * r fit (1 - ratio) * out * in, rounded down and
/// clamped to [1, min(out, in)].
Index rank_for_ratio(Index out, Index in, double ratio);

/// Rank-r factors of `w` under whitening `white`.
Factors decompose_rank(const MatrixF& w, const Whitening& white, Index rank);

/// Factors at the rank given by rank_for_ratio.
Factors decompose(const MatrixF& w, const MatrixD& gram, double ratio, double ridge_rel = 0.0);

/// ||(W - W') X||_F through the identity ||M X||_F^2 = trace(M G M^T).
double gram_norm(const MatrixD& m, const MatrixD& gram);

/// ||W X - W' X||_F for the rank-r whitened truncation of `w`, evaluated as the
/// tail sqrt(sum_{i >= r} sigma_i^2) of the singular values of W F.
double truncation_loss(const MatrixF& w, const MatrixD& gram, Index rank, double ridge_rel = 0.0);

struct MatrixGroup {
  std::string id;
  std::vector<std::string> members;
  std::vector<double> l_min;
};

struct Allocation {
  std::vector<std::vector<double>> score;      // per group, per member
  std::vector<std::vector<double>> unclamped;  // ratios before clamping
  std::vector<std::vector<double>> ratio;      // clamped to [lo, hi]
  bool degenerate = false;                     // every score hit the log clamp
};

Allocation allocate_ratios(std::span<const MatrixGroup> groups, double target_ratio, double lo = 0.05, double hi = 0.95);

struct CompressionOptions {
  double ratio = 0.4;
  double ridge_rel = 1e-6;
  double min_ratio = 0.05;
  double max_ratio = 0.95;
  /// Adjust ranks so that block matrices and heads each lose at least `ratio`
  /// of their parameters, overshooting by less than one rank step.
  bool budget_correction = true;
};

struct PlanEntry {
  std::string name;
  std::string group;
  Index out = 0;
  Index in = 0;
  double l_min = 0.0;
  double score = 0.0;
  double ratio = 0.0;
  Index rank = 0;
  Index params_before = 0;
  Index params_after = 0;
  MatrixF a;
  MatrixF b;
};

struct CompressionPlan {
  double target_ratio = 0.0;
  std::vector<PlanEntry> entries;
  bool degenerate_scores = false;

  Index params_before() const;
  Index params_after() const;
  /// Fraction of the planned matrices' parameters that is removed.
  double achieved_removal() const;
};

/// Scores, ratios, ranks and factors for every matrix in `calib`. Groups are
/// one per block (prefix before the matrix name) plus one "heads" group for
/// lm_proj matrices.
CompressionPlan build_plan(const FamilialModel<float>& model, const CalibrationSet& calib,
                           const CompressionOptions& options);

/// Replaces every planned matrix by its factor pair. Names that do not resolve
/// to a dense linear of the right shape raise an integrity error.
FamilialModel<float> apply_compression(const FamilialModel<float>& model, const CompressionPlan& plan);

/// `{target_ratio, achieved_removal, params_before, params_after, matrices: [...]}`.
void write_plan_json(std::ostream& out, const CompressionPlan& plan);

struct CompressionReport {
  std::vector<double> base_perplexity;        // per exit
  std::vector<double> compressed_perplexity;  // per exit
  Index params_before = 0;                    // whole model
  Index params_after = 0;
  std::vector<std::pair<std::string, double>> l_min;
};

CompressionReport measure_compression(const FamilialModel<float>& base, const FamilialModel<float>& compressed,
                                      const CompressionPlan& plan, std::span<const TokenId> eval_tokens, Index window);

/// `branch,base_ppl,compressed_ppl,delta_ppl,relative_delta` rows.
void write_report_csv(std::ostream& out, const CompressionReport& report);
/// Short human-readable summary.
void write_report_text(std::ostream& out, const CompressionReport& report, const CompressionPlan& plan);

}  // namespace familykit

#endif  // FAMILYKIT_COMPRESS_HPP
