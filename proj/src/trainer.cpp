// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "familykit/error.hpp"

namespace familykit {

std::string to_string(LambdaKind kind) {
  switch (kind) {
    case LambdaKind::constant:
      return "constant";
    case LambdaKind::linear_decay:
      return "linear_decay";
    case LambdaKind::cosine_decay:
      return "cosine_decay";
  }
  return "?";
}

LambdaKind lambda_kind_from_string(const std::string& s) {
  if (s == "constant") return LambdaKind::constant;
  if (s == "linear_decay") return LambdaKind::linear_decay;
  if (s == "cosine_decay") return LambdaKind::cosine_decay;
  throw config_error("unknown lambda kind '" + s + "'");
}

void LambdaSchedule::validate() const {
  if (initial.empty()) throw config_error("lambda: no branch weights");
  if (final.size() != initial.size()) throw config_error("lambda: initial and final lengths differ");
  if (total_steps < 1) throw config_error("lambda: total_steps must be >= 1");
  const int main = main_index();
  if (main < 0 || main >= static_cast<int>(initial.size())) throw config_error("lambda: main_branch out of range");
  if (initial[static_cast<std::size_t>(main)] != 1.0 || final[static_cast<std::size_t>(main)] != 1.0) {
    throw config_error("lambda: main branch weight must stay at 1.0");
  }
  for (std::size_t k = 0; k < initial.size(); ++k) {
    if (!(initial[k] >= 0.0) || !(final[k] >= 0.0)) throw config_error("lambda: weights must be >= 0");
    if (kind != LambdaKind::constant && final[k] > initial[k]) {
      throw config_error("lambda: decay schedules must not increase (branch " + std::to_string(k) + ")");
    }
  }
}

LambdaSchedule LambdaSchedule::default_for(int exits, std::int64_t total_steps) {
  LambdaSchedule s;
  s.kind = LambdaKind::linear_decay;
  s.initial.assign(static_cast<std::size_t>(exits), 1.0);
  s.final.assign(static_cast<std::size_t>(exits), 0.1);
  s.final.back() = 1.0;
  s.total_steps = total_steps;
  return s;
}

LambdaSchedule LambdaSchedule::single_branch(int exits, int branch, std::int64_t total_steps) {
  LambdaSchedule s;
  s.kind = LambdaKind::constant;
  s.initial.assign(static_cast<std::size_t>(exits), 0.0);
  s.initial[static_cast<std::size_t>(branch)] = 1.0;
  s.final = s.initial;
  s.total_steps = total_steps;
  s.main_branch = branch;
  return s;
}

std::vector<double> lambda_at(const LambdaSchedule& schedule, std::int64_t step) {
  schedule.validate();
  const double t = std::clamp(static_cast<double>(step) / static_cast<double>(schedule.total_steps), 0.0, 1.0);
  std::vector<double> w(schedule.initial.size());
  for (std::size_t k = 0; k < w.size(); ++k) {
    const double a = schedule.initial[k];
    const double b = schedule.final[k];
    switch (schedule.kind) {
      case LambdaKind::constant:
        w[k] = a;
        break;
      case LambdaKind::linear_decay:
        w[k] = a + (b - a) * t;
        break;
      case LambdaKind::cosine_decay:
        w[k] = b + (a - b) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
        break;
    }
  }
  return w;
}

void TrainConfig::validate() const {
  if (!(peak_lr > 0.0)) throw config_error("train: peak_lr must be positive");
  if (total_steps < 1) throw config_error("train: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) throw config_error("train: warmup_steps must lie in [0, total_steps]");
  if (batch < 1 || seq_len < 2) throw config_error("train: batch >= 1 and seq_len >= 2 required");
  if (weight_decay < 0.0 || grad_clip_norm <= 0.0 || adam_eps <= 0.0) throw config_error("train: optimizer settings");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw config_error("train: betas must lie in [0, 1)");
  if (stop_step && (*stop_step < 0 || *stop_step > total_steps)) throw config_error("train: stop_step out of range");
}

double lr_at(const TrainConfig& c, std::int64_t step) {
  if (step < 0) step = 0;
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const std::int64_t decay_steps = c.total_steps - c.warmup_steps;
  if (decay_steps <= 0) return c.peak_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - c.warmup_steps) / static_cast<double>(decay_steps));
  return c.peak_lr * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

double joint_loss(std::span<const double> losses, std::span<const double> weights) {
  if (losses.size() != weights.size()) {
    throw config_error("joint_loss: " + std::to_string(losses.size()) + " losses vs " + std::to_string(weights.size()) +
                       " weights");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    if (weights[k] < 0.0) throw config_error("joint_loss: negative weight");
    total += weights[k] * losses[k];
  }
  return total;
}

namespace {

bool is_gain(const std::string& name) { return name.ends_with("_norm"); }

struct Pass {
  std::vector<double> losses;
  double total = 0.0;
  bool differentiable = false;
};

// Builds the joint loss on `tape`; runs backward when any parameter is trainable.
Pass forward_backward(Tape<float>& tape, const FamilialModel<float>& model, const TokenBatch& batch,
                      std::span<const double> weights) {
  if (static_cast<int>(weights.size()) != model.config.exits()) throw config_error("one lambda per exit required");
  Forward<float> fwd(tape, model, batch, /*grad_enabled=*/true);
  std::vector<Var<float>> logits = fwd.all_branches();
  const std::vector<TokenId> targets = next_token_targets(batch);
  std::vector<Var<float>> losses;
  Pass pass;
  for (const auto& l : logits) {
    losses.push_back(cross_entropy<float>(l, targets, -1));
    pass.losses.push_back(tape.scalar(losses.back()));
  }
  Var<float> total = weighted_sum<float>(losses, weights);
  pass.total = tape.scalar(total);
  if (!std::isfinite(pass.total)) {
    throw numeric_error("non-finite loss " + std::to_string(pass.total) + "; training diverged");
  }
  pass.differentiable = tape.requires_grad(total);
  if (pass.differentiable) tape.backward(total);
  return pass;
}

}  // namespace

std::map<std::string, MatrixF> compute_gradients(const FamilialModel<float>& model, const TokenBatch& batch,
                                                 std::span<const double> weights, std::vector<double>* losses) {
  Tape<float> tape;
  Pass pass = forward_backward(tape, model, batch, weights);
  if (losses) *losses = pass.losses;
  std::map<std::string, MatrixF> grads;
  model.for_each_parameter([&](const std::string& name, const MatrixF& p) {
    if (!model.trainable(name)) return;
    const MatrixF* g = tape.parameter_grad(p);
    grads.emplace(name, g ? *g : MatrixF::Zero(p.rows(), p.cols()));
  });
  return grads;
}

StepMetrics train_step(TrainState& state, const TrainConfig& config, const LambdaSchedule& schedule,
                       const TokenBatch& batch) {
  StepMetrics metrics;
  metrics.step = state.step;
  metrics.lr = lr_at(config, state.step);
  metrics.lambda = lambda_at(schedule, state.step);

  Tape<float> tape;
  Pass pass = forward_backward(tape, state.model, batch, metrics.lambda);
  metrics.branch_loss = pass.losses;
  metrics.total_loss = pass.total;

  if (!pass.differentiable) {
    metrics.nothing_trainable = true;
    ++state.step;
    state.log.push_back(metrics);
    return metrics;
  }

  struct Slot {
    const std::string* name;
    MatrixF* param;
    const MatrixF* grad;
  };
  std::vector<std::string> names;
  std::vector<Slot> slots;
  state.model.for_each_parameter([&](const std::string& name, MatrixF& p) {
    if (!state.model.trainable(name)) return;
    names.push_back(name);
    slots.push_back({nullptr, &p, tape.parameter_grad(p)});
  });
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i].name = &names[i];

  double sq = 0.0;
  for (const auto& s : slots) {
    if (s.grad) sq += s.grad->template cast<double>().squaredNorm();
  }
  metrics.grad_norm = std::sqrt(sq);
  if (!std::isfinite(metrics.grad_norm)) throw numeric_error("non-finite gradient norm; training diverged");
  const double clip = metrics.grad_norm > config.grad_clip_norm ? config.grad_clip_norm / (metrics.grad_norm + 1e-6) : 1.0;

  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const float lr = static_cast<float>(metrics.lr);
  for (const auto& s : slots) {
    MatrixF g = s.grad ? MatrixF(*s.grad * static_cast<float>(clip)) : MatrixF::Zero(s.param->rows(), s.param->cols());
    auto [it, inserted] = state.moments.try_emplace(*s.name);
    AdamMoments& mom = it->second;
    if (inserted) {
      mom.m = MatrixF::Zero(g.rows(), g.cols());
      mom.v = MatrixF::Zero(g.rows(), g.cols());
    }
    const float b1 = static_cast<float>(config.beta1);
    const float b2 = static_cast<float>(config.beta2);
    mom.m = b1 * mom.m + (1.0f - b1) * g;
    mom.v = b2 * mom.v + (1.0f - b2) * g.cwiseProduct(g);
    const float wd = is_gain(*s.name) ? 0.0f : static_cast<float>(config.weight_decay);
    MatrixF& p = *s.param;
    for (Index i = 0; i < p.size(); ++i) {
      const float mhat = static_cast<float>(mom.m.data()[i] / bc1);
      const float vhat = static_cast<float>(mom.v.data()[i] / bc2);
      const float update = mhat / (std::sqrt(vhat) + static_cast<float>(config.adam_eps)) + wd * p.data()[i];
      p.data()[i] -= lr * update;
    }
  }
  ++state.step;
  state.log.push_back(metrics);
  return metrics;
}

bool glob_match(std::string_view pattern, std::string_view name) {
  std::size_t p = 0, n = 0, star = std::string_view::npos, mark = 0;
  while (n < name.size()) {
    if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = n;
    } else if (p < pattern.size() && pattern[p] == name[n]) {
      ++p;
      ++n;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      n = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

void set_freeze(FamilialModel<float>& model, const std::function<bool(const std::string&)>& frozen,
                std::map<std::string, AdamMoments>* moments) {
  model.frozen.clear();
  model.for_each_parameter([&](const std::string& name, const MatrixF&) {
    if (frozen(name)) {
      model.frozen.insert(name);
      if (moments) moments->erase(name);
    }
  });
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MetricsWriter::MetricsWriter(std::ostream& out, bool with_arm, bool header) : out_(out), with_arm_(with_arm) {
  if (header) out_ << "step,branch,loss,lambda,lr,grad_norm" << (with_arm_ ? ",arm" : "") << '\n';
}

void MetricsWriter::write(const StepMetrics& m, const std::string& arm) {
  std::lock_guard lock(mu_);
  for (std::size_t k = 0; k < m.branch_loss.size(); ++k) {
    out_ << m.step << ',' << k << ',' << format_double(m.branch_loss[k]) << ',' << format_double(m.lambda[k]) << ','
         << format_double(m.lr) << ',' << format_double(m.grad_norm);
    if (with_arm_) out_ << ',' << arm;
    out_ << '\n';
  }
}

}  // namespace familykit
