// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/expand.hpp"

#include <algorithm>
#include <cmath>

#include "familykit/data.hpp"
#include "familykit/error.hpp"

namespace familykit {

std::string to_string(InitMode mode) { return mode == InitMode::clone ? "clone" : "randomized"; }

InitMode init_mode_from_string(const std::string& s) {
  if (s == "randomized" || s == "random") return InitMode::randomized;
  if (s == "clone") return InitMode::clone;
  throw config_error("unknown init mode '" + s + "'");
}

int branch_depth(const FamilyConfig& c, int branch) {
  return c.exit_depths[static_cast<std::size_t>(branch)] + c.branch_blocks + c.expanded(branch);
}

void ExpansionSpec::validate(const FamilyConfig& config) const {
  if (target_branch < 0 || target_branch >= config.exits()) {
    throw config_error("expansion: target_branch " + std::to_string(target_branch) + " out of range");
  }
  if (n_new_blocks < 1) throw config_error("expansion: n_new_blocks must be >= 1");
  if (!(gaussian_std > 0.0)) throw config_error("expansion: gaussian_std must be positive");
  if (init_mode == InitMode::clone) {
    const int depth = branch_depth(config, target_branch);
    if (clone_source < -1 || clone_source >= depth) {
      throw config_error("expansion: clone_source " + std::to_string(clone_source) + " outside the branch path [0, " +
                         std::to_string(depth) + ")");
    }
  }
}

namespace {

const BlockWeights<float>& path_block(const FamilialModel<float>& m, int branch, int index) {
  const int d = m.config.exit_depths[static_cast<std::size_t>(branch)];
  const auto& head = m.exits[static_cast<std::size_t>(branch)];
  if (index < d) return m.backbone[static_cast<std::size_t>(index)];
  index -= d;
  if (index < static_cast<int>(head.blocks.size())) return head.blocks[static_cast<std::size_t>(index)];
  return head.expansion[static_cast<std::size_t>(index - static_cast<int>(head.blocks.size()))];
}

TokenBatch default_probe(const FamilyConfig& c, std::uint64_t seed) {
  CounterRng rng = CounterRng(seed).split("probe");
  TokenBatch t;
  t.batch = 4;
  t.seq = std::min(c.ctx_len, 16);
  for (Index i = 0; i < t.batch * t.seq; ++i) t.ids.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(c.vocab))));
  return t;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

}  // namespace

Expanded expand(const FamilialModel<float>& model, const ExpansionSpec& spec, const TokenBatch* probe) {
  spec.validate(model.config);
  const int t = spec.target_branch;
  Expanded out{model, {}};
  FamilialModel<float>& m = out.model;
  auto& head = m.exits[static_cast<std::size_t>(t)];
  const std::size_t first_new = head.expansion.size();
  const std::string prefix = "exits." + std::to_string(t) + ".expand.";
  const CounterRng root = CounterRng(spec.seed).split("expand");

  out.report.depth_before = branch_depth(model.config, t);
  const int source = spec.clone_source < 0 ? out.report.depth_before - 1 : spec.clone_source;
  for (int j = 0; j < spec.n_new_blocks; ++j) {
    const std::string name = prefix + std::to_string(first_new + static_cast<std::size_t>(j));
    BlockWeights<float> b = spec.init_mode == InitMode::clone ? path_block(model, t, source)
                                                              : init_block<float>(m.config, root, name, spec.gaussian_std);
    b.wo = {MatrixF::Zero(m.config.hidden, m.config.hidden), {}, {}};
    b.w_down = {MatrixF::Zero(m.config.hidden, m.config.mlp_hidden()), {}, {}};
    out.report.added_parameters += block_parameters(b);
    head.expansion.push_back(std::move(b));
  }
  if (m.config.expanded_blocks.empty()) m.config.expanded_blocks.assign(static_cast<std::size_t>(m.config.exits()), 0);
  m.config.expanded_blocks[static_cast<std::size_t>(t)] += spec.n_new_blocks;
  out.report.depth_after = branch_depth(m.config, t);

  std::vector<std::string> fresh;
  for (std::size_t j = first_new; j < head.expansion.size(); ++j) fresh.push_back(prefix + std::to_string(j) + ".");
  const std::string lm = "exits." + std::to_string(t) + ".lm_proj";
  auto is_trainable = [&](const std::string& name) {
    if (name == lm || name == lm + ".A" || name == lm + ".B") return true;
    return std::any_of(fresh.begin(), fresh.end(), [&](const std::string& p) { return name.starts_with(p); });
  };
  set_freeze(m, [&](const std::string& name) { return !is_trainable(name); });
  m.for_each_parameter([&](const std::string& name, const MatrixF&) {
    if (m.trainable(name)) out.report.trainable.push_back(name);
  });
  out.report.frozen_parameters = static_cast<Index>(m.frozen.size());

  const TokenBatch fallback = default_probe(m.config, spec.seed);
  out.report.identity_deviation = verify_identity(model, m, probe ? *probe : fallback);
  return out;
}

double verify_identity(const FamilialModel<float>& base, const FamilialModel<float>& expanded, const TokenBatch& probe) {
  if (base.config.vocab != expanded.config.vocab || base.config.exits() != expanded.config.exits()) {
    throw config_error("verify_identity: models do not share vocabulary and exits");
  }
  const auto a = forward_all_branches(base, probe);
  const auto b = forward_all_branches(expanded, probe);
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    worst = std::max(worst, static_cast<double>((a[k] - b[k]).cwiseAbs().maxCoeff()));
  }
  return worst;
}

std::vector<double> cosine_scores(const MatrixF& in, const MatrixF& out, bool* degenerate) {
  if (in.rows() != out.rows() || in.cols() != out.cols()) throw dimension_error("cosine_scores: shape mismatch");
  std::vector<double> row(static_cast<std::size_t>(in.rows()));
  for (Index t = 0; t < in.rows(); ++t) {
    const Eigen::RowVectorXd a = in.row(t).cast<double>();
    const Eigen::RowVectorXd b = out.row(t).cast<double>();
    const double na = a.squaredNorm();
    const double nb = b.squaredNorm();
    if (na == 0.0 || nb == 0.0) {
      if (degenerate) *degenerate = true;
      row[static_cast<std::size_t>(t)] = 0.0;
    } else {
      row[static_cast<std::size_t>(t)] = std::clamp(a.dot(b) / std::sqrt(na * nb), -1.0, 1.0);
    }
  }
  return row;
}

CosineMap layer_cosine_similarity(const FamilialModel<float>& model, const std::vector<TokenId>& text, int branch) {
  if (text.empty()) throw input_error("cosine similarity needs a nonempty text");
  CosineMap map;
  std::vector<std::vector<double>> rows;
  ForwardHooks<float> hooks;
  hooks.block = [&](const std::string& name, const MatrixF& in, const MatrixF& out) {
    map.blocks.push_back(name);
    std::vector<double> row = cosine_scores(in, out, &map.degenerate);
    rows.push_back(std::move(row));
  };
  const TokenBatch batch{text, 1, static_cast<Index>(text.size())};
  forward_branch(model, batch, branch, &hooks);
  map.scores.resize(static_cast<Index>(rows.size()), static_cast<Index>(text.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t t = 0; t < text.size(); ++t) map.scores(static_cast<Index>(i), static_cast<Index>(t)) = rows[i][t];
  }
  return map;
}

void write_cosine_csv(std::ostream& out, const CosineMap& map, const std::vector<TokenId>& text) {
  out << "layer,token_index,token_text,cosine\n";
  for (Index i = 0; i < map.scores.rows(); ++i) {
    for (Index t = 0; t < map.scores.cols(); ++t) {
      out << map.blocks[static_cast<std::size_t>(i)] << ',' << t << ','
          << csv_field(ByteTokenizer::token_text(text[static_cast<std::size_t>(t)])) << ','
          << format_double(map.scores(i, t)) << '\n';
    }
  }
}

LambdaSchedule expansion_schedule(const FamilyConfig& config, int target_branch, std::int64_t total_steps) {
  return LambdaSchedule::single_branch(config.exits(), target_branch, total_steps);
}

AblationResult ablation_run(const FamilialModel<float>& model, const std::vector<TokenId>& corpus, ExpansionSpec spec,
                            const TrainConfig& config, std::uint64_t data_seed, MetricsWriter* metrics) {
  config.validate();
  AblationResult result;
  const std::int64_t end = config.stop_step.value_or(config.total_steps);
  for (InitMode mode : {InitMode::randomized, InitMode::clone}) {
    spec.init_mode = mode;
    Expanded e = expand(model, spec);
    TrainState state{std::move(e.model), {}, 0, {}};
    const LambdaSchedule schedule = expansion_schedule(state.model.config, spec.target_branch, config.total_steps);
    const WindowSampler sampler(corpus, config.seq_len, config.batch, data_seed);
    auto& trace = mode == InitMode::clone ? result.clone : result.randomized;
    while (state.step < end) {
      const StepMetrics m = train_step(state, config, schedule, sampler.batch_at(state.step));
      trace.push_back(m.branch_loss[static_cast<std::size_t>(spec.target_branch)]);
      if (metrics) metrics->write(m, to_string(mode));
    }
  }
  return result;
}

}  // namespace familykit
