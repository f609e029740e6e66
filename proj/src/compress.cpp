// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/compress.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "familykit/error.hpp"
#include "familykit/eval.hpp"
#include "familykit/json_io.hpp"
#include "familykit/linalg.hpp"
#include "familykit/trainer.hpp"

namespace familykit {

void GramStat::add(const MatrixF& rows) {
  const MatrixD x = rows.cast<double>();
  if (gram.size() == 0) gram = MatrixD::Zero(x.cols(), x.cols());
  if (gram.rows() != x.cols()) throw dimension_error("gram feature width changed");
  gram.noalias() += x.transpose() * x;
  samples += x.rows();
}

CalibrationSet capture_activations(const FamilialModel<float>& model, std::span<const TokenBatch> batches,
                                   const MatrixPredicate& scope) {
  if (batches.empty()) throw config_error("calibration set is empty");
  CalibrationSet set;
  ForwardHooks<float> hooks;
  hooks.linear_input = [&](const std::string& name, const MatrixF& input) {
    if (scope(name)) set.grams[name].add(input);
  };
  for (const auto& b : batches) forward_all_branches(model, b, &hooks);
  return set;
}

bool in_expanded_scope(const FamilyConfig& config, const std::string& matrix) {
  if (!matrix.starts_with("exits.")) return false;
  const std::size_t dot = matrix.find('.', 6);
  if (dot == std::string::npos) return false;
  const std::string k = matrix.substr(6, dot - 6);
  if (k.empty() || k.find_first_not_of("0123456789") != std::string::npos) return false;
  const int exit = std::stoi(k);
  if (exit >= config.exits() || config.expanded(exit) == 0) return false;
  const std::string rest = matrix.substr(dot + 1);
  if (rest == "lm_proj") return true;
  if (!rest.starts_with("expand.")) return false;
  const std::string leaf = rest.substr(rest.rfind('.') + 1);
  return std::find(kBlockMatrices.begin(), kBlockMatrices.end(), leaf) != kBlockMatrices.end();
}

Whitening whiten(const MatrixD& gram, double ridge_rel, bool prefer_cholesky) {
  if (gram.rows() != gram.cols() || gram.rows() == 0) throw dimension_error("whiten needs a square Gram matrix");
  if (!gram.allFinite()) throw numeric_error("whiten: non-finite Gram matrix");
  const Index n = gram.rows();
  MatrixD g = gram;
  if (ridge_rel > 0.0) g.diagonal().array() += ridge_rel * g.trace() / static_cast<double>(n);

  Whitening w;
  if (prefer_cholesky) {
    try {
      w.factor = cholesky<double>(g);
      w.inverse = lower_triangular_inverse<double>(w.factor);
      w.path = WhiteningPath::cholesky;
      return w;
    } catch (const DefinitenessError&) {
      w.fell_back = true;
    }
  }
  const Svd<double> d = svd<double>(g);
  const double top = d.S.size() ? d.S.maxCoeff() : 0.0;
  if (!(top > 0.0)) throw numeric_error("whiten: Gram matrix is zero");
  w.path = WhiteningPath::svd;
  w.us = d.U;
  w.sqrt_s = d.S.cwiseMax(0.0).cwiseSqrt();
  const Eigen::VectorXd inv = d.S.cwiseMax(1e-8 * top).cwiseSqrt().cwiseInverse();
  w.factor = w.us * w.sqrt_s.asDiagonal();
  w.inverse = inv.asDiagonal() * w.us.transpose();
  return w;
}

Index rank_for_ratio(Index out, Index in, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw config_error("compression ratio must lie in [0, 1)");
  const double budget = (1.0 - ratio) * static_cast<double>(out) * static_cast<double>(in);
  const auto r = static_cast<Index>(std::floor(budget / static_cast<double>(out + in)));
  return std::clamp<Index>(r, 1, std::min(out, in));
}

namespace {

struct DoubleFactors {
  MatrixD a;
  MatrixD b;
  Eigen::VectorXd singular;
};

DoubleFactors factor(const MatrixD& w, const Whitening& white, Index rank) {
  if (white.factor.rows() != w.cols()) throw dimension_error("whitening width does not match the weight");
  if (rank < 1 || rank > std::min(w.rows(), w.cols())) {
    throw dimension_error("rank " + std::to_string(rank) + " outside [1, " + std::to_string(std::min(w.rows(), w.cols())) + "]");
  }
  const Svd<double> d = svd<double>(MatrixD(w * white.factor));
  const Eigen::VectorXd root = d.S.head(rank).cwiseSqrt();
  DoubleFactors f;
  f.a = d.U.leftCols(rank) * root.asDiagonal();
  f.b = root.asDiagonal() * d.V.topRows(rank) * white.inverse;
  f.singular = d.S;
  return f;
}

std::string group_of(const std::string& name) {
  if (name.ends_with(".lm_proj")) return "heads";
  return name.substr(0, name.rfind('.'));
}

// Moves ranks by single steps until the pool removes at least `target` of its
// parameters and giving back any further step would drop below it.
void correct_budget(std::vector<PlanEntry*>& pool, double target) {
  double before = 0.0;
  for (const auto* e : pool) before += static_cast<double>(e->params_before);
  auto after = [&] {
    Index n = 0;
    for (const auto* e : pool) n += (e->out + e->in) * e->rank;
    return static_cast<double>(n);
  };
  auto shortfall = [](const PlanEntry& e) {
    return e.ratio - (1.0 - static_cast<double>((e.out + e.in) * e.rank) / static_cast<double>(e.params_before));
  };
  // Remove rank where the achieved ratio lags its allocation the most.
  while (1.0 - after() / before < target) {
    PlanEntry* pick = nullptr;
    for (auto* e : pool) {
      if (e->rank > 1 && (!pick || shortfall(*e) > shortfall(*pick))) pick = e;
    }
    if (!pick) break;
    --pick->rank;
  }
  // Give rank back where it overshoots the most, while the target still holds.
  for (;;) {
    PlanEntry* pick = nullptr;
    const double now = after();
    for (auto* e : pool) {
      if (e->rank >= std::min(e->out, e->in)) continue;
      if (1.0 - (now + static_cast<double>(e->out + e->in)) / before < target) continue;
      if (!pick || shortfall(*e) < shortfall(*pick)) pick = e;
    }
    if (!pick) break;
    ++pick->rank;
  }
}

}  // namespace

Factors decompose_rank(const MatrixF& w, const Whitening& white, Index rank) {
  DoubleFactors f = factor(w.cast<double>(), white, rank);
  return {f.a.cast<float>(), f.b.cast<float>(), std::move(f.singular)};
}

Factors decompose(const MatrixF& w, const MatrixD& gram, double ratio, double ridge_rel) {
  return decompose_rank(w, whiten(gram, ridge_rel), rank_for_ratio(w.rows(), w.cols(), ratio));
}

double gram_norm(const MatrixD& m, const MatrixD& gram) {
  if (m.cols() != gram.rows()) throw dimension_error("gram_norm shapes");
  return std::sqrt(std::max(0.0, (m * gram * m.transpose()).trace()));
}

double truncation_loss(const MatrixF& w, const MatrixD& gram, Index rank, double ridge_rel) {
  const DoubleFactors f = factor(w.cast<double>(), whiten(gram, ridge_rel), rank);
  // Summed from the smallest value up, so a higher rank never gives a larger loss.
  double tail = 0.0;
  for (Index i = f.singular.size() - 1; i >= rank; --i) tail += f.singular[i] * f.singular[i];
  return std::sqrt(tail);
}

Allocation allocate_ratios(std::span<const MatrixGroup> groups, double target_ratio, double lo, double hi) {
  if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw config_error("target ratio must lie in (0, 1)");
  if (!(lo <= hi)) throw config_error("ratio clamp bounds are inverted");
  Allocation out;
  std::size_t members = 0, clamped = 0;
  for (const auto& g : groups) {
    if (g.l_min.size() != g.members.size()) throw config_error("group " + g.id + ": one loss per member required");
    if (g.l_min.empty()) throw config_error("group " + g.id + " has no members");
    std::vector<double> s;
    for (double l : g.l_min) {
      if (!std::isfinite(l) || l < 0.0) throw numeric_error("group " + g.id + ": invalid truncation loss");
      const double floor = 1.0 + 1e-6;
      if (l <= floor) ++clamped;
      s.push_back(1.0 / std::log(std::max(l, floor)));
    }
    members += s.size();
    // Scores are scaled by their maximum first so that equal scores give
    // exactly the target ratio.
    const double top = *std::max_element(s.begin(), s.end());
    double norm_sum = 0.0;
    for (double si : s) norm_sum += si / top;
    std::vector<double> raw, ratio;
    const double len = static_cast<double>(s.size());
    for (double si : s) {
      raw.push_back(target_ratio * (len * (si / top) / norm_sum));
      ratio.push_back(std::clamp(raw.back(), lo, hi));
    }
    out.score.push_back(std::move(s));
    out.unclamped.push_back(std::move(raw));
    out.ratio.push_back(std::move(ratio));
  }
  out.degenerate = members > 0 && clamped == members;
  return out;
}

Index CompressionPlan::params_before() const {
  Index n = 0;
  for (const auto& e : entries) n += e.params_before;
  return n;
}

Index CompressionPlan::params_after() const {
  Index n = 0;
  for (const auto& e : entries) n += e.params_after;
  return n;
}

double CompressionPlan::achieved_removal() const {
  const Index before = params_before();
  if (before == 0) return 0.0;
  return 1.0 - static_cast<double>(params_after()) / static_cast<double>(before);
}

CompressionPlan build_plan(const FamilialModel<float>& model, const CalibrationSet& calib,
                           const CompressionOptions& options) {
  CompressionPlan plan;
  plan.target_ratio = options.ratio;
  auto& m = const_cast<FamilialModel<float>&>(model);

  std::vector<Whitening> white;
  std::vector<const MatrixF*> weights;
  std::vector<MatrixGroup> groups;
  std::vector<std::pair<std::size_t, std::size_t>> slot;  // entry -> (group, member)
  for (const auto& name : model.parameter_names()) {
    const auto it = calib.grams.find(name);
    if (it == calib.grams.end()) continue;
    const Linear<float>* lin = find_linear(m, name);
    if (!lin || lin->factored()) throw integrity_error("cannot compress '" + name + "': not a dense linear");
    PlanEntry e;
    e.name = name;
    e.group = group_of(name);
    e.out = lin->weight.rows();
    e.in = lin->weight.cols();
    e.params_before = e.out * e.in;
    white.push_back(whiten(it->second.gram, options.ridge_rel));
    weights.push_back(&lin->weight);
    const MatrixD wd = lin->weight.cast<double>();
    const DoubleFactors f = factor(wd, white.back(), rank_for_ratio(e.out, e.in, options.ratio));
    e.l_min = gram_norm(wd - f.a * f.b, it->second.gram);

    auto g = std::find_if(groups.begin(), groups.end(), [&](const MatrixGroup& x) { return x.id == e.group; });
    if (g == groups.end()) {
      groups.push_back({e.group, {}, {}});
      g = groups.end() - 1;
    }
    slot.emplace_back(static_cast<std::size_t>(g - groups.begin()), g->members.size());
    g->members.push_back(name);
    g->l_min.push_back(e.l_min);
    plan.entries.push_back(std::move(e));
  }
  if (plan.entries.empty()) return plan;

  const Allocation alloc = allocate_ratios(groups, options.ratio, options.min_ratio, options.max_ratio);
  plan.degenerate_scores = alloc.degenerate;
  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    PlanEntry& e = plan.entries[i];
    e.score = alloc.score[slot[i].first][slot[i].second];
    e.ratio = alloc.ratio[slot[i].first][slot[i].second];
    e.rank = rank_for_ratio(e.out, e.in, e.ratio);
  }

  if (options.budget_correction) {
    // Heads and blocks are balanced separately so that both the whole plan
    // and the expanded blocks alone reach the target.
    for (bool heads : {false, true}) {
      std::vector<PlanEntry*> pool;
      for (auto& e : plan.entries) {
        if ((e.group == "heads") == heads) pool.push_back(&e);
      }
      if (!pool.empty()) correct_budget(pool, options.ratio);
    }
  }

  for (std::size_t i = 0; i < plan.entries.size(); ++i) {
    PlanEntry& e = plan.entries[i];
    e.params_after = (e.out + e.in) * e.rank;
    DoubleFactors f = factor(weights[i]->cast<double>(), white[i], e.rank);
    e.a = f.a.cast<float>();
    e.b = f.b.cast<float>();
  }
  return plan;
}

FamilialModel<float> apply_compression(const FamilialModel<float>& model, const CompressionPlan& plan) {
  FamilialModel<float> out = model;
  for (const auto& e : plan.entries) {
    Linear<float>* lin = find_linear(out, e.name);
    if (!lin) throw integrity_error("plan names '" + e.name + "', which the model does not have");
    if (lin->factored()) throw integrity_error("'" + e.name + "' is already factored");
    if (lin->weight.rows() != e.out || lin->weight.cols() != e.in || e.a.rows() != e.out || e.b.cols() != e.in ||
        e.a.cols() != e.b.rows() || e.a.cols() != e.rank) {
      throw integrity_error("plan shapes for '" + e.name + "' do not match the model");
    }
    lin->a = e.a;
    lin->b = e.b;
    lin->weight.resize(0, 0);
    if (out.frozen.erase(e.name)) {
      out.frozen.insert(e.name + ".A");
      out.frozen.insert(e.name + ".B");
    }
  }
  return out;
}

void write_plan_json(std::ostream& out, const CompressionPlan& plan) {
  json matrices = json::array();
  for (const auto& e : plan.entries) {
    matrices.push_back({{"name", e.name},
                        {"group", e.group},
                        {"L_min", e.l_min},
                        {"score", e.score},
                        {"ratio", e.ratio},
                        {"rank", e.rank},
                        {"params_before", e.params_before},
                        {"params_after", e.params_after}});
  }
  json doc{{"target_ratio", plan.target_ratio},
           {"achieved_removal", plan.achieved_removal()},
           {"params_before", plan.params_before()},
           {"params_after", plan.params_after()},
           {"degenerate_scores", plan.degenerate_scores},
           {"matrices", matrices}};
  out << doc.dump(2) << '\n';
}

CompressionReport measure_compression(const FamilialModel<float>& base, const FamilialModel<float>& compressed,
                                      const CompressionPlan& plan, std::span<const TokenId> eval_tokens, Index window) {
  CompressionReport r;
  for (const auto& p : family_perplexity(base, eval_tokens, window)) r.base_perplexity.push_back(p.perplexity());
  for (const auto& p : family_perplexity(compressed, eval_tokens, window)) r.compressed_perplexity.push_back(p.perplexity());
  r.params_before = param_count(base).total;
  r.params_after = param_count(compressed).total;
  for (const auto& e : plan.entries) r.l_min.emplace_back(e.name, e.l_min);
  return r;
}

void write_report_csv(std::ostream& out, const CompressionReport& r) {
  out << "branch,base_ppl,compressed_ppl,delta_ppl,relative_delta\n";
  for (std::size_t k = 0; k < r.base_perplexity.size(); ++k) {
    const double b = r.base_perplexity[k];
    const double c = r.compressed_perplexity[k];
    out << k << ',' << format_double(b) << ',' << format_double(c) << ',' << format_double(c - b) << ','
        << format_double((c - b) / b) << '\n';
  }
}

void write_report_text(std::ostream& out, const CompressionReport& r, const CompressionPlan& plan) {
  char line[160];
  std::snprintf(line, sizeof line, "compressed %zu matrices: %lld -> %lld parameters (%.2f%% removed, target %.2f%%)\n",
                plan.entries.size(), static_cast<long long>(plan.params_before()),
                static_cast<long long>(plan.params_after()), 100.0 * plan.achieved_removal(), 100.0 * plan.target_ratio);
  out << line;
  std::snprintf(line, sizeof line, "model parameters: %lld -> %lld\n", static_cast<long long>(r.params_before),
                static_cast<long long>(r.params_after));
  out << line;
  for (std::size_t k = 0; k < r.base_perplexity.size(); ++k) {
    const double b = r.base_perplexity[k];
    const double c = r.compressed_perplexity[k];
    std::snprintf(line, sizeof line, "branch %zu: perplexity %.4f -> %.4f (%+.2f%%)\n", k, b, c, 100.0 * (c - b) / b);
    out << line;
  }
}

}  // namespace familykit
