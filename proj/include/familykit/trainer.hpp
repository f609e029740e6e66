// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_TRAINER_HPP
#define FAMILYKIT_TRAINER_HPP

// Joint optimisation of every exit: L_total = sum_k lambda_k(t) * L_k, AdamW
// updates restricted to the model's trainable parameters.

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "familykit/data.hpp"
#include "familykit/forward.hpp"
#include "familykit/model.hpp"

namespace familykit {

enum class LambdaKind { constant, linear_decay, cosine_decay };

std::string to_string(LambdaKind kind);
LambdaKind lambda_kind_from_string(const std::string& s);

/// Time-dependent per-exit loss weights.
struct LambdaSchedule {
  LambdaKind kind = LambdaKind::linear_decay;
  std::vector<double> initial;
  std::vector<double> final;
  std::int64_t total_steps = 1;
  /// Exit whose weight is pinned to 1.0; -1 means the last exit.
  int main_branch = -1;

  int main_index() const { return main_branch < 0 ? static_cast<int>(initial.size()) - 1 : main_branch; }
  void validate() const;

  /// Auxiliary exits decay linearly 1.0 -> 0.1, the last exit stays at 1.0.
  static LambdaSchedule default_for(int exits, std::int64_t total_steps);
  /// Constant weight 1.0 on `branch`, 0 elsewhere.
  static LambdaSchedule single_branch(int exits, int branch, std::int64_t total_steps);
};

/// Weights at `step`; steps past total_steps are clamped to the final weights.
std::vector<double> lambda_at(const LambdaSchedule& schedule, std::int64_t step);

struct TrainConfig {
  double peak_lr = 3e-3;
  std::int64_t warmup_steps = 50;
  std::int64_t total_steps = 500;
  Index batch = 8;
  Index seq_len = 64;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  /// Stop early at this step (schedules still span total_steps). Used to
  /// split a run for resumption.
  std::optional<std::int64_t> stop_step;

  void validate() const;
};

/// Linear warm-up 0 -> peak, then cosine decay peak -> 0.1 * peak.
double lr_at(const TrainConfig& config, std::int64_t step);

/// sum_k weights[k] * losses[k] in binary64.
double joint_loss(std::span<const double> losses, std::span<const double> weights);

struct AdamMoments {
  MatrixF m;
  MatrixF v;
};

struct StepMetrics {
  std::int64_t step = 0;
  std::vector<double> branch_loss;
  std::vector<double> lambda;
  double total_loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  /// Set when no parameter was trainable; the step only advanced the counter.
  bool nothing_trainable = false;
};

struct TrainState {
  FamilialModel<float> model;
  /// Present only for trainable parameters that have been updated.
  std::map<std::string, AdamMoments> moments;
  std::int64_t step = 0;
  std::vector<StepMetrics> log;
};

/// One optimisation step on `batch`: forward through every exit, per-exit
/// next-token cross-entropy, weighted aggregation, backward, global-norm
/// clipping and AdamW on trainable parameters. Throws a numeric error on a
/// non-finite loss.
StepMetrics train_step(TrainState& state, const TrainConfig& config, const LambdaSchedule& schedule,
                       const TokenBatch& batch);

/// Per-parameter gradients of the weighted loss, without updating anything.
/// Only trainable parameters appear in the result.
std::map<std::string, MatrixF> compute_gradients(const FamilialModel<float>& model, const TokenBatch& batch,
                                                 std::span<const double> weights, std::vector<double>* losses = nullptr);

/// Marks every parameter whose name satisfies `frozen` as frozen (and all
/// others trainable), dropping optimizer moments of frozen parameters.
void set_freeze(FamilialModel<float>& model, const std::function<bool(const std::string&)>& frozen,
                std::map<std::string, AdamMoments>* moments = nullptr);

/// Glob match supporting '*' (any run of characters).
bool glob_match(std::string_view pattern, std::string_view name);

/// Thread-safe CSV sink for `step,branch,loss,lambda,lr,grad_norm` rows, with an
/// optional trailing `arm` column. The header is skipped when appending.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream& out, bool with_arm = false, bool header = true);
  void write(const StepMetrics& m, const std::string& arm = {});

 private:
  std::ostream& out_;
  bool with_arm_;
  std::mutex mu_;
};

/// Formats a double so that it parses back to the same value.
std::string format_double(double v);

}  // namespace familykit

#endif  // FAMILYKIT_TRAINER_HPP
