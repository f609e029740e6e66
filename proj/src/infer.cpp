// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/infer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "familykit/error.hpp"
#include "familykit/json_io.hpp"

namespace familykit {

std::string to_string(DecodeMode mode) { return mode == DecodeMode::greedy ? "greedy" : "sample"; }

DecodeMode decode_mode_from_string(const std::string& s) {
  if (s == "greedy") return DecodeMode::greedy;
  if (s == "sample") return DecodeMode::sample;
  throw config_error("decode mode must be 'greedy' or 'sample', got '" + s + "'");
}

std::string to_string(Backfill mode) { return mode == Backfill::lazy ? "lazy" : "always"; }

Backfill backfill_from_string(const std::string& s) {
  if (s == "lazy") return Backfill::lazy;
  if (s == "always") return Backfill::always;
  throw config_error("backfill must be 'lazy' or 'always', got '" + s + "'");
}

std::vector<int> ExitPolicy::resolved(const FamilyConfig& config) const {
  std::vector<int> out = allowed;
  if (out.empty()) {
    out.resize(static_cast<std::size_t>(config.exits()));
    std::iota(out.begin(), out.end(), 0);
  }
  std::sort(out.begin(), out.end(), [&](int a, int b) {
    return config.exit_depths[static_cast<std::size_t>(a)] < config.exit_depths[static_cast<std::size_t>(b)];
  });
  return out;
}

void ExitPolicy::validate(const FamilyConfig& config) const {
  if (!(threshold >= 0.0)) throw config_error("exit threshold must be >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw config_error("temperature must be positive");
  std::vector<int> seen = allowed;
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) throw config_error("allowed exits repeat");
  for (int e : seen) {
    if (e < 0 || e >= config.exits()) throw config_error("allowed exit " + std::to_string(e) + " out of range");
  }
  if (!seen.empty() && seen.back() != config.exits() - 1) throw config_error("allowed exits must include the final exit");
}

double confidence(std::span<const float> logits) {
  if (logits.empty()) throw input_error("confidence of an empty row");
  double peak = -std::numeric_limits<double>::infinity();
  for (float x : logits) {
    if (!std::isfinite(x)) throw input_error("confidence of non-finite logits");
    peak = std::max(peak, static_cast<double>(x));
  }
  double total = 0.0;
  for (float x : logits) total += std::exp(static_cast<double>(x) - peak);
  return 1.0 / total;
}

TokenId argmax_lowest(std::span<const float> logits) {
  if (logits.empty()) throw input_error("argmax of an empty row");
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

std::vector<TokenId> GenerationTrace::tokens() const {
  std::vector<TokenId> out;
  for (const auto& r : records) out.push_back(r.token);
  return out;
}

namespace {

MatrixF project(const MatrixF& x, const Linear<float>& w) {
  if (w.factored()) return linear<float>(linear<float>(x, w.b), w.a);
  return linear<float>(x, w.weight);
}

std::span<const float> row_span(const MatrixF& m, Index r) {
  return {m.data() + r * m.cols(), static_cast<std::size_t>(m.cols())};
}

}  // namespace

DecodeSession::DecodeSession(const FamilialModel<float>& model, ExitPolicy policy)
    : model_(model), policy_(std::move(policy)) {
  const FamilyConfig& c = model.config;
  policy_.validate(c);
  order_ = policy_.resolved(c);
  const Index ctx = c.ctx_len;
  auto add = [&](const BlockWeights<float>& w, int input, bool backbone) {
    Stage s;
    s.weights = &w;
    s.input = input;
    s.backbone = backbone;
    s.out.resize(ctx, c.hidden);
    s.k.resize(ctx, c.kv_dim());
    s.v.resize(ctx, c.kv_dim());
    stages_.push_back(std::move(s));
    return static_cast<int>(stages_.size()) - 1;
  };
  for (const auto& b : model.backbone) add(b, static_cast<int>(stages_.size()) - 1, true);
  for (int k = 0; k < c.exits(); ++k) {
    const ExitHead<float>& e = model.exits[static_cast<std::size_t>(k)];
    int prev = c.exit_depths[static_cast<std::size_t>(k)] - 1;
    for (const auto& b : e.blocks) prev = add(b, prev, false);
    for (const auto& b : e.expansion) prev = add(b, prev, false);
    tap_.push_back(prev);
  }
}

void DecodeSession::append(TokenId token) {
  if (token < 0 || token >= model_.config.vocab) throw input_error("token id " + std::to_string(token) + " outside vocabulary");
  if (length() >= model_.config.ctx_len) throw input_error("context length exceeded");
  tokens_.push_back(token);
}

MatrixF DecodeSession::input_rows(int stage, Index from, Index to) const {
  if (stage >= 0) return stages_[static_cast<std::size_t>(stage)].out.middleRows(from, to - from);
  MatrixF rows(to - from, model_.config.hidden);
  for (Index p = from; p < to; ++p) rows.row(p - from) = model_.embedding.row(tokens_[static_cast<std::size_t>(p)]);
  return rows;
}

void DecodeSession::ensure(int stage, Index n) {
  if (stage < 0) return;
  Stage& s = stages_[static_cast<std::size_t>(stage)];
  if (s.done >= n) return;
  ensure(s.input, n);
  run(s, s.done, n);
  s.done = n;
}

void DecodeSession::run(Stage& s, Index from, Index to) {
  const FamilyConfig& c = model_.config;
  const BlockWeights<float>& w = *s.weights;
  const Index hd = c.head_dim();
  const AttentionShape shape{c.q_heads, c.kv_heads, hd};
  const Index m = to - from;
  std::vector<Index> positions(static_cast<std::size_t>(m));
  std::iota(positions.begin(), positions.end(), from);

  const MatrixF h = input_rows(s.input, from, to);
  const MatrixF x = rmsnorm<float>(h, w.attn_norm.row(0), c.rms_eps);
  MatrixF q = project(x, w.wq);
  MatrixF k = project(x, w.wk);
  const MatrixF v = project(x, w.wv);
  apply_rope<float>(q, c.q_heads, hd, positions, c.rope_base);
  apply_rope<float>(k, c.kv_heads, hd, positions, c.rope_base);
  s.k.middleRows(from, m) = k;
  s.v.middleRows(from, m) = v;

  MatrixF att(m, q.cols());
  std::vector<float> scratch(static_cast<std::size_t>(to));
  for (Index i = 0; i < m; ++i) {
    for (Index head = 0; head < shape.q_heads; ++head) {
      const Index g = head / shape.group();
      attend_one<float>(q.data() + i * q.cols() + head * hd, s.k.data() + g * hd, s.v.data() + g * hd, s.k.cols(),
                        from + i + 1, hd, att.data() + i * att.cols() + head * hd, scratch.data());
    }
  }
  const MatrixF h1 = h + project(att, w.wo);
  const MatrixF x2 = rmsnorm<float>(h1, w.mlp_norm.row(0), c.rms_eps);
  const MatrixF act = swiglu<float>(project(x2, w.w_gate), project(x2, w.w_up));
  s.out.middleRows(from, m) = h1 + project(act, w.w_down);

  total_runs_ += m;
  const Index own = length() - 1;
  for (Index p = from; p < to; ++p) {
    if (p == own) {
      ++(s.backbone ? own_backbone_ : own_head_);
    } else {
      ++backfill_runs_;
    }
  }
}

MatrixF DecodeSession::logits(int exit) {
  if (length() == 0) throw input_error("logits of an empty context");
  if (exit < 0 || exit >= model_.config.exits()) throw config_error("exit " + std::to_string(exit) + " out of range");
  const int tap = tap_[static_cast<std::size_t>(exit)];
  ensure(tap, length());
  const MatrixF h = input_rows(tap, length() - 1, length());
  const ExitHead<float>& e = model_.exits[static_cast<std::size_t>(exit)];
  return project(rmsnorm<float>(h, e.final_norm.row(0), model_.config.rms_eps), e.lm_proj);
}

void DecodeSession::backfill_all() {
  for (int k : order_) ensure(tap_[static_cast<std::size_t>(k)], length());
  ensure(static_cast<int>(model_.backbone.size()) - 1, length());
}

TokenRecord DecodeSession::next() {
  if (length() == 0) throw input_error("decoding needs at least one context token");
  TokenRecord rec;
  rec.position = length();
  rec.step = steps_++;
  if (policy_.backfill == Backfill::always) backfill_all();
  own_backbone_ = 0;
  own_head_ = 0;
  MatrixF chosen;
  for (std::size_t i = 0; i < order_.size(); ++i) {
    const int k = order_[i];
    MatrixF l = logits(k);
    const double conf = confidence(row_span(l, 0));
    rec.confidences.push_back(conf);
    if (conf >= policy_.threshold || i + 1 == order_.size()) {
      rec.exit = k;
      chosen = std::move(l);
      break;
    }
  }
  rec.exit_depth = model_.config.exit_depths[static_cast<std::size_t>(rec.exit)];
  rec.backbone_runs = own_backbone_;
  rec.head_runs = own_head_;

  if (policy_.mode == DecodeMode::greedy) {
    rec.token = argmax_lowest(row_span(chosen, 0));
  } else {
    const auto row = row_span(chosen, 0);
    std::vector<double> p(row.size());
    double peak = -std::numeric_limits<double>::infinity();
    for (float x : row) peak = std::max(peak, static_cast<double>(x) / policy_.temperature);
    double total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
      p[j] = std::exp(static_cast<double>(row[j]) / policy_.temperature - peak);
      total += p[j];
    }
    CounterRng rng = CounterRng(policy_.seed).split(static_cast<std::uint64_t>(rec.position));
    double u = rng.uniform() * total;
    rec.token = static_cast<TokenId>(row.size() - 1);
    for (std::size_t j = 0; j < row.size(); ++j) {
      u -= p[j];
      if (u < 0.0) {
        rec.token = static_cast<TokenId>(j);
        break;
      }
    }
  }
  append(rec.token);
  return rec;
}

GenerationTrace generate(const FamilialModel<float>& model, std::span<const TokenId> prompt, const ExitPolicy& policy,
                         Index max_new) {
  if (prompt.empty()) throw input_error("prompt is empty");
  if (max_new < 0) throw input_error("max_new must be >= 0");
  const Index ctx = model.config.ctx_len;
  if (static_cast<Index>(prompt.size()) > ctx) {
    throw input_error("prompt of " + std::to_string(prompt.size()) + " tokens exceeds context " + std::to_string(ctx));
  }
  GenerationTrace trace;
  trace.prompt.assign(prompt.begin(), prompt.end());
  const Index room = ctx - static_cast<Index>(prompt.size());
  trace.truncated = max_new > room;
  const Index steps = std::min(max_new, room);

  DecodeSession session(model, policy);
  for (TokenId t : prompt) session.append(t);
  for (Index i = 0; i < steps; ++i) trace.records.push_back(session.next());
  trace.backfill_runs = session.backfill_runs();
  trace.total_runs = session.total_runs();
  return trace;
}

std::vector<TokenId> greedy_decode(const FamilialModel<float>& model, std::span<const TokenId> prompt, int branch,
                                   Index max_new) {
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  for (Index i = 0; i < max_new && static_cast<Index>(context.size()) < model.config.ctx_len; ++i) {
    const TokenBatch b{context, 1, static_cast<Index>(context.size())};
    const MatrixF logits = forward_branch(model, b, branch);
    const TokenId t = argmax_lowest(row_span(logits, logits.rows() - 1));
    out.push_back(t);
    context.push_back(t);
  }
  return out;
}

ExitHistogram exit_histogram(const GenerationTrace& trace) {
  ExitHistogram h;
  double sum = 0.0;
  for (const auto& r : trace.records) {
    ++h.counts[r.exit_depth];
    sum += r.exit_depth;
  }
  h.tokens = static_cast<Index>(trace.records.size());
  if (h.tokens > 0) h.mean_depth = sum / static_cast<double>(h.tokens);
  return h;
}

void write_trace_jsonl(std::ostream& out, const GenerationTrace& trace) {
  for (const auto& r : trace.records) {
    const nlohmann::ordered_json line{{"step", r.step}, {"token_id", r.token}, {"exit_depth", r.exit_depth}, {"confidences", r.confidences}};
    out << line.dump() << '\n';
  }
}

}  // namespace familykit
