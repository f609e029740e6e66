// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. The end-to-end pipeline runs twice under the same
// seed in a scratch directory; later criteria read its artifacts.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "familykit/checkpoint.hpp"
#include "familykit/compress.hpp"
#include "familykit/data.hpp"
#include "familykit/eval.hpp"
#include "familykit/expand.hpp"
#include "familykit/infer.hpp"
#include "familykit/json_io.hpp"
#include "familykit/pipeline.hpp"
#include "familykit/trainer.hpp"
#include "test_support.hpp"

using namespace familykit;
namespace fs = std::filesystem;
using familykit::testing::random_matrix;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw data_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

bool bit_equal(const MatrixF& a, const MatrixF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

double rel_frobenius(const MatrixD& got, const MatrixD& want) { return (got - want).norm() / want.norm(); }

// ---------------------------------------------------------------------------
// End-to-end pipeline

struct PipelineRun {
  fs::path dir;
  double seconds = 0.0;  // train through generate
  std::map<std::string, double> stage_seconds;
  std::map<std::string, int> codes;
  std::string log;
};

struct Fixture {
  fs::path root;
  fs::path corpus;
  fs::path heldout;
  std::deque<PipelineRun> runs;  // stable references across growth
};

const std::vector<std::string> kTimedStages{"train", "expand", "compress", "eval", "generate"};

RunConfig stage_config(const Fixture& fx, const fs::path& dir, const std::string& stage, int branch = 0) {
  json doc{{"seed", 42},
           {"expansion", {{"ablate", true}}},
           {"compression", {{"ratio", 0.4}, {"scope", "expanded"}, {"tolerance", 0.02}}},
           {"generate", {{"max_new", 64}, {"prompt", "The"}}},
           {"paths", {{"corpus", fx.corpus.string()}, {"eval_corpus", fx.heldout.string()}}}};
  json& paths = doc["paths"];
  if (stage == "train") {
    paths["out"] = (dir / "train").string();
  } else if (stage == "expand") {
    paths["checkpoint"] = (dir / "train" / "checkpoint").string();
    paths["out"] = (dir / "expand").string();
  } else if (stage == "compress") {
    paths["checkpoint"] = (dir / "expand" / "checkpoint").string();
    paths["out"] = (dir / "compress").string();
  } else if (stage == "eval" || stage == "generate") {
    paths["checkpoint"] = (dir / "compress" / "checkpoint").string();
    paths["out"] = (dir / stage).string();
  } else if (stage == "export") {
    paths["checkpoint"] = (dir / "compress" / "checkpoint").string();
    paths["out"] = (dir / ("export" + std::to_string(branch))).string();
    doc["export"] = json{{"branch", branch}};
  } else if (stage == "export-eval") {
    paths["checkpoint"] = (dir / ("export" + std::to_string(branch)) / "checkpoint").string();
    paths["out"] = (dir / ("export" + std::to_string(branch)) / "eval").string();
  }
  return parse_run_config(doc, nullptr);
}

PipelineRun run_pipeline(const Fixture& fx, const fs::path& dir) {
  PipelineRun r;
  r.dir = dir;
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ostringstream log;
  auto stage = [&](const std::string& name, const std::string& command, const std::string& key, int branch = 0) {
    const auto t0 = Clock::now();
    log << "== " << name << '\n';
    r.codes[name] = run_command(command, stage_config(fx, dir, key, branch), log, log);
    r.stage_seconds[name] = seconds_since(t0);
  };
  const auto t0 = Clock::now();
  for (const auto& s : kTimedStages) stage(s, s, s);
  r.seconds = seconds_since(t0);
  for (int k = 0; k < 2; ++k) {
    stage("export" + std::to_string(k), "export", "export", k);
    stage("export" + std::to_string(k) + "-eval", "eval", "export-eval", k);
  }
  r.log = log.str();
  std::ofstream(dir / "log.txt") << r.log;
  return r;
}

Fixture& fixture() {
  static Fixture fx = [] {
    Fixture f;
    f.root = fs::temp_directory_path() / "familykit-acceptance";
    fs::remove_all(f.root);
    fs::create_directories(f.root);
    f.corpus = f.root / "corpus.txt";
    f.heldout = f.root / "heldout.txt";
    std::ofstream(f.corpus, std::ios::binary) << familykit::testing::synthetic_corpus(42, 100 * 1024);
    std::ofstream(f.heldout, std::ios::binary) << familykit::testing::synthetic_corpus(4242, 16 * 1024);
    return f;
  }();
  return fx;
}

const PipelineRun& pipeline(std::size_t i) {
  Fixture& fx = fixture();
  while (fx.runs.size() <= i) {
    fx.runs.push_back(run_pipeline(fx, fx.root / ("run" + std::to_string(fx.runs.size()))));
  }
  return fx.runs[i];
}

std::string failed_stages(const PipelineRun& r) {
  std::string out;
  for (const auto& [name, code] : r.codes) {
    if (code != 0) out += name + "=" + std::to_string(code) + " ";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Criteria

Verdict identity_at_init() {
  const auto t0 = Clock::now();
  const FamilialModel<float> base = init_model<float>(desk_config(), 42);
  CounterRng rng(4201);
  std::vector<TokenBatch> prompts;
  for (int i = 0; i < 100; ++i) {
    const Index len = 1 + static_cast<Index>(rng.uniform() * 64.0) % 64;
    TokenBatch b{{}, 1, len};
    for (Index t = 0; t < len; ++t) b.ids.push_back(static_cast<TokenId>(rng.next_u64() % ByteTokenizer::kVocab));
    prompts.push_back(std::move(b));
  }
  double worst = 0.0;
  int models = 0;
  for (InitMode mode : {InitMode::randomized, InitMode::clone}) {
    for (int target = 0; target < 2; ++target) {
      ExpansionSpec spec;
      spec.target_branch = target;
      spec.init_mode = mode;
      spec.seed = 77;
      const FamilialModel<float> expanded = expand(base, spec).model;
      ++models;
      for (const auto& p : prompts) {
        for (int k = 0; k < 2; ++k) {
          const MatrixF a = forward_branch(base, p, k);
          const MatrixF b = forward_branch(expanded, p, k);
          worst = std::max(worst, static_cast<double>((a - b).cwiseAbs().maxCoeff()));
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst == 0.0 && secs < 60.0,
          fmt("max |logit diff| = %g over 100 prompts x %d expansions x 2 exits (%.1f s, limit 60 s)", worst, models,
              secs)};
}

Verdict gradient_check() {
  const auto t0 = Clock::now();
  FamilyConfig c;
  c.n_layers = 2;
  c.hidden = 16;
  c.q_heads = 4;
  c.kv_heads = 2;
  c.ctx_len = 8;
  c.exit_depths = {1, 2};
  c.branch_blocks = 1;
  FamilialModel<double> model = init_model<double>(c, 11);
  CounterRng rng(12);
  model.for_each_parameter([&](const std::string& name, MatrixD& p) {
    for (Index i = 0; i < p.size(); ++i) {
      p.data()[i] = name.ends_with("_norm") ? 1.0 + 0.1 * rng.gaussian() : 0.2 * rng.gaussian();
    }
  });
  TokenBatch batch{{}, 2, 8};
  for (int i = 0; i < 16; ++i) batch.ids.push_back(static_cast<TokenId>(rng.next_u64() % 40));
  const std::vector<TokenId> targets = next_token_targets(batch);
  const std::vector<double> weights{0.6, 1.0};

  auto build = [&](Tape<double>& tape, bool grad) {
    Forward<double> f(tape, model, batch, grad);
    std::vector<Var<double>> losses;
    for (auto& logits : f.all_branches()) losses.push_back(cross_entropy<double>(logits, targets, -1));
    return weighted_sum<double>(losses, weights);
  };
  Tape<double> tape;
  const Var<double> loss = build(tape, true);
  tape.backward(loss);
  std::map<std::string, MatrixD> analytic;
  model.for_each_parameter([&](const std::string& name, const MatrixD& p) {
    const MatrixD* g = tape.parameter_grad(p);
    analytic[name] = g ? *g : MatrixD::Zero(p.rows(), p.cols());
  });

  auto eval = [&] {
    Tape<double> t;
    return t.scalar(build(t, false));
  };
  double worst = 0.0;
  std::string worst_name;
  Index checked = 0;
  model.for_each_parameter([&](const std::string& name, MatrixD& p) {
    const MatrixD fd = familykit::testing::finite_difference(eval, p, 1e-5);
    const double e = familykit::testing::max_relative_error(analytic[name], fd, 1e-8);
    checked += p.size();
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  });
  const double secs = seconds_since(t0);
  return {worst < 1e-3 && secs < 300.0,
          fmt("max relative error %.3g (at %s) over %lld parameters, binary64, h=1e-5 (%.1f s, limit 300 s)", worst,
              worst_name.c_str(), static_cast<long long>(checked), secs)};
}

Verdict joint_aggregation() {
  CounterRng rng(31);
  double worst_oracle = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.next_u64() % 8;
    std::vector<double> losses(k), weights(k);
    for (std::size_t i = 0; i < k; ++i) {
      losses[i] = 0.1 + 6.0 * rng.uniform();
      weights[i] = rng.uniform();
    }
    const double oracle = std::inner_product(losses.begin(), losses.end(), weights.begin(), 0.0);
    worst_oracle = std::max(worst_oracle, std::abs(joint_loss(losses, weights) - oracle) / oracle);
  }

  // The trainer's reported total against the same oracle over its own branch losses.
  TrainConfig cfg;
  cfg.total_steps = 5;
  cfg.warmup_steps = 1;
  cfg.batch = 4;
  cfg.seq_len = 32;
  const auto tokens = ByteTokenizer::encode(familykit::testing::synthetic_corpus(3, 8192));
  const WindowSampler sampler(tokens, cfg.seq_len, cfg.batch, 3);
  TrainState st{init_model<float>(desk_config(), 3), {}, 0, {}};
  const LambdaSchedule sched = LambdaSchedule::default_for(2, cfg.total_steps);
  for (int s = 0; s < 5; ++s) {
    const StepMetrics m = train_step(st, cfg, sched, sampler.batch_at(s));
    const double oracle = std::inner_product(m.branch_loss.begin(), m.branch_loss.end(), m.lambda.begin(), 0.0);
    worst_oracle = std::max(worst_oracle, std::abs(m.total_loss - oracle) / oracle);
  }

  // Scaling one branch's weight scales every gradient it produces.
  const TokenBatch batch = sampler.batch_at(9);
  const auto g1 = compute_gradients(st.model, batch, std::vector<double>{1.0, 0.0});
  const auto both1 = compute_gradients(st.model, batch, std::vector<double>{1.0, 1.0});
  double worst_linear = 0.0;
  for (double c : {0.25, 3.0, 7.5}) {
    const auto gc = compute_gradients(st.model, batch, std::vector<double>{c, 0.0});
    for (const auto& [name, g] : g1) {
      const double n = static_cast<double>(g.norm());
      if (n == 0.0) continue;
      const MatrixD want = g.cast<double>() * c;
      worst_linear = std::max(worst_linear, rel_frobenius(gc.at(name).cast<double>(), want));
    }
    // With the other branch active, parameters private to exit 0 still scale linearly.
    const auto bc = compute_gradients(st.model, batch, std::vector<double>{c, 1.0});
    for (const auto& [name, g] : both1) {
      if (!name.starts_with("exits.0.")) continue;
      worst_linear = std::max(worst_linear, rel_frobenius(bc.at(name).cast<double>(), g.cast<double>() * c));
    }
  }
  return {worst_oracle <= 1e-12 && worst_linear <= 1e-6,
          fmt("oracle rel error %.3g (limit 1e-12); gradient scaling rel error %.3g (limit 1e-6)", worst_oracle,
              worst_linear)};
}

Verdict frozen_backbone() {
  const PipelineRun& r = pipeline(0);
  if (r.codes.at("train") != 0 || r.codes.at("expand") != 0) return {false, "pipeline failed: " + failed_stages(r)};
  const Checkpoint before = load_checkpoint(r.dir / "train" / "checkpoint");
  const Checkpoint after = load_checkpoint(r.dir / "expand" / "checkpoint");
  const json report = json::parse(slurp(r.dir / "expand" / "expansion_report.json"));
  const int target = report.at("target_branch").get<int>();
  const std::string head = "exits." + std::to_string(target) + ".lm_proj";
  const std::string new_blocks = "exits." + std::to_string(target) + ".expand.";

  Index compared = 0;
  std::vector<std::string> changed;
  before.model.for_each_parameter([&](const std::string& name, const MatrixF& p) {
    if (name == head) return;
    const MatrixF* q = const_cast<FamilialModel<float>&>(after.model).find_parameter(name);
    ++compared;
    if (!q || !bit_equal(p, *q)) changed.push_back(name);
  });

  std::set<std::string> expected, trainable;
  after.model.for_each_parameter([&](const std::string& name, const MatrixF&) {
    if (name == head || name.starts_with(new_blocks)) expected.insert(name);
    if (after.model.trainable(name)) trainable.insert(name);
  });
  const std::set<std::string> reported(report.at("trainable").begin(), report.at("trainable").end());
  const MatrixF* head_before = const_cast<FamilialModel<float>&>(before.model).find_parameter(head);
  const MatrixF* head_after = const_cast<FamilialModel<float>&>(after.model).find_parameter(head);
  const bool head_moved = head_before && head_after && !bit_equal(*head_before, *head_after);
  const bool pass = after.step == 300 && changed.empty() && trainable == expected && reported == expected && head_moved;
  return {pass, fmt("%lld expansion steps; %zu of %lld frozen tensors changed; trainable set %s expected (%zu tensors: "
                    "new blocks + %s); target head %s",
                    static_cast<long long>(after.step), changed.size(), static_cast<long long>(compared),
                    trainable == expected && reported == expected ? "==" : "!=", expected.size(), head.c_str(),
                    head_moved ? "trained" : "unchanged")};
}

Verdict compression_accounting() {
  const PipelineRun& r = pipeline(0);
  const Checkpoint expanded = load_checkpoint(r.dir / "expand" / "checkpoint");
  if (r.codes.at("compress") != 0) return {false, "compress exited " + std::to_string(r.codes.at("compress"))};
  const Checkpoint compressed = load_checkpoint(r.dir / "compress" / "checkpoint");

  Index scope_before = 0;
  expanded.model.for_each_parameter([&](const std::string& name, const MatrixF& p) {
    if (in_expanded_scope(expanded.model.config, name)) scope_before += p.size();
  });
  Index total_before = 0, total_after = 0;
  expanded.model.for_each_parameter([&](const std::string&, const MatrixF& p) { total_before += p.size(); });
  compressed.model.for_each_parameter([&](const std::string&, const MatrixF& p) { total_after += p.size(); });
  const bool counts_agree = param_count(expanded.model).total == total_before &&
                            param_count(compressed.model).total == total_after;
  const double removal = static_cast<double>(total_before - total_after) / static_cast<double>(scope_before);

  // An unreachable tolerance must turn the same run into exit code 4.
  const Fixture& fx = fixture();
  RunConfig strict = stage_config(fx, r.dir, "compress");
  strict.paths.out = r.dir / "compress-strict";
  strict.compression.tolerance = 0.0;
  std::ostringstream sink;
  const int strict_code = run_command("compress", strict, sink, sink);

  const bool pass = counts_agree && std::abs(removal - 0.4) <= 0.02 && strict_code == (removal == 0.4 ? 0 : 4);
  return {pass, fmt("removed %lld of %lld expanded-scope parameters = %.4f (target 0.40 +/- 0.02); exit 0, "
                    "exit %d with zero tolerance",
                    static_cast<long long>(total_before - total_after), static_cast<long long>(scope_before), removal,
                    strict_code)};
}

Verdict compression_numerics() {
  std::vector<std::string> notes;
  bool pass = true;

  // (a) full rank reconstructs W X.
  double worst_a = 0.0;
  for (std::uint64_t s = 0; s < 6; ++s) {
    const Index out = 8 + static_cast<Index>(s) * 5, in = 6 + static_cast<Index>(s) * 3;
    const MatrixD x = random_matrix<double>(600 + s, in, 3 * in);
    const MatrixF w = random_matrix<float>(700 + s, out, in);
    const Factors f = decompose_rank(w, whiten(x * x.transpose()), std::min(out, in));
    worst_a = std::max(worst_a, rel_frobenius((f.a * f.b).cast<double>() * x, w.cast<double>() * x));
  }
  pass = pass && worst_a <= 1e-4;
  notes.push_back(fmt("(a) %.2g", worst_a));

  // (b) truncation loss never increases with rank.
  int violations = 0;
  for (std::uint64_t s = 0; s < 6; ++s) {
    const MatrixD x = random_matrix<double>(800 + s, 12, s % 2 ? 8 : 40);  // includes a singular Gram
    const MatrixF w = random_matrix<float>(900 + s, 10, 12);
    double prev = std::numeric_limits<double>::infinity();
    for (Index r = 1; r <= 10; ++r) {
      const double l = truncation_loss(w, x * x.transpose(), r);
      if (l > prev) ++violations;
      prev = l;
    }
  }
  pass = pass && violations == 0;
  notes.push_back(fmt("(b) %d increases", violations));

  // (c) identity Gram equals plain truncated SVD.
  double worst_c = 0.0;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Index out = 6 + static_cast<Index>(s) * 4, in = 9;
    const MatrixF w = random_matrix<float>(1000 + s, out, in);
    Eigen::BDCSVD<MatrixD> svd(w.cast<double>(), Eigen::ComputeThinU | Eigen::ComputeThinV);
    for (Index r = 1; r <= std::min(out, in); ++r) {
      const MatrixD oracle = svd.matrixU().leftCols(r) * svd.singularValues().head(r).asDiagonal() *
                             svd.matrixV().leftCols(r).transpose();
      const Factors f = decompose_rank(w, whiten(MatrixD::Identity(in, in)), r);
      worst_c = std::max(worst_c, (f.a.cast<double>() * f.b.cast<double>() - oracle).cwiseAbs().maxCoeff());
    }
  }
  pass = pass && worst_c <= 1e-5;
  notes.push_back(fmt("(c) %.2g", worst_c));

  // (d) symmetric groups get exactly R; unclamped group means equal R.
  bool exact = true;
  for (double ratio : {0.1, 0.25, 0.4, 0.7}) {
    const std::vector<MatrixGroup> same{{"g", {"a", "b", "c", "d"}, {7.0, 7.0, 7.0, 7.0}}};
    const Allocation a = allocate_ratios(same, ratio);
    for (double v : a.ratio[0]) exact = exact && v == ratio;
  }
  CounterRng rng(1100);
  std::vector<MatrixGroup> groups;
  for (int g = 0; g < 6; ++g) {
    MatrixGroup grp{"g" + std::to_string(g), {}, {}};
    for (int i = 0; i < 3 + g; ++i) {
      grp.members.push_back(std::to_string(i));
      grp.l_min.push_back(1.5 + 100.0 * rng.uniform());
    }
    groups.push_back(grp);
  }
  double worst_d = 0.0;
  const Allocation spread = allocate_ratios(groups, 0.4);
  for (const auto& u : spread.unclamped) {
    worst_d = std::max(worst_d, std::abs(std::accumulate(u.begin(), u.end(), 0.0) / static_cast<double>(u.size()) - 0.4));
  }
  pass = pass && exact && worst_d <= 1e-12;
  notes.push_back(fmt("(d) symmetric %s, mean error %.2g", exact ? "exact" : "inexact", worst_d));

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {pass, detail + " (limits 1e-4, 0, 1e-5, exact/1e-12)"};
}

std::vector<std::vector<TokenId>> probe_prompts() {
  const auto text = read_corpus(fixture().heldout);
  std::vector<std::vector<TokenId>> out;
  for (int i = 0; i < 50; ++i) {
    const std::size_t at = static_cast<std::size_t>(i) * 251 % (text.size() - 40);
    const std::size_t len = 4 + static_cast<std::size_t>(i) % 24;
    out.emplace_back(text.begin() + static_cast<std::ptrdiff_t>(at), text.begin() + static_cast<std::ptrdiff_t>(at + len));
  }
  return out;
}

Verdict early_exit_extremes() {
  const PipelineRun& r = pipeline(0);
  const Checkpoint ck = load_checkpoint(r.dir / "compress" / "checkpoint");
  const FamilialModel<float>& model = ck.model;
  const int last = model.config.exits() - 1;
  const auto prompts = probe_prompts();

  Index shallow = 0, tokens0 = 0;
  int mismatched = 0;
  for (const auto& p : prompts) {
    ExitPolicy zero;
    zero.threshold = 0.0;
    for (const auto& rec : generate(model, p, zero, 16).records) {
      ++tokens0;
      shallow += rec.exit == 0 ? 1 : 0;
    }
    ExitPolicy above;
    above.threshold = 1.5;
    if (generate(model, p, above, 16).tokens() != greedy_decode(model, p, last, 16)) ++mismatched;
  }

  const std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0, 1.5};
  std::vector<double> means;
  for (double tau : grid) {
    ExitPolicy pol;
    pol.threshold = tau;
    double depth = 0.0;
    for (const auto& p : prompts) depth += generate(model, p, pol, 1).records.front().exit_depth;
    means.push_back(depth / static_cast<double>(prompts.size()));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < means.size(); ++i) monotone = monotone && means[i] >= means[i - 1];
  std::string curve;
  for (std::size_t i = 0; i < grid.size(); ++i) curve += fmt("%s%.2g:%.2f", i ? " " : "", grid[i], means[i]);

  const bool pass = shallow == tokens0 && mismatched == 0 && monotone;
  return {pass, fmt("tau=0: %lld/%lld tokens at the shallowest exit; tau=1.5: %d/50 prompts differ from full-depth "
                    "greedy; mean exit depth %s [%s]",
                    static_cast<long long>(shallow), static_cast<long long>(tokens0), mismatched,
                    monotone ? "nondecreasing" : "NOT monotone", curve.c_str())};
}

double csv_ppl(const fs::path& p, int branch) {
  for (const auto& row : read_csv(p)) {
    if (std::stoi(row.at(0)) == branch) return std::stod(row.at(4));
  }
  throw data_error("no branch " + std::to_string(branch) + " in " + p.string());
}

Verdict submodel_equivalence() {
  const PipelineRun& r = pipeline(0);
  const std::string failed = failed_stages(r);
  if (!failed.empty()) return {false, "pipeline failed: " + failed};
  double worst = 0.0;
  std::string values;
  for (int k = 0; k < 2; ++k) {
    const double family = csv_ppl(r.dir / "eval" / "perplexity.csv", k);
    const fs::path sub_csv = r.dir / ("export" + std::to_string(k)) / "eval" / "perplexity.csv";
    const double sub = csv_ppl(sub_csv, 0);
    worst = std::max(worst, std::abs(family - sub));
    values += fmt("%sbranch %d: %.6f vs %.6f", k ? ", " : "", k, family, sub);
  }
  return {worst <= 1e-6, fmt("held-out perplexity, family vs exported (%s); max |diff| %.3g (limit 1e-6)",
                             values.c_str(), worst)};
}

Verdict training_sanity() {
  const PipelineRun& r = pipeline(0);
  if (r.codes.at("train") != 0) return {false, "train exited " + std::to_string(r.codes.at("train"))};
  const std::string bytes = slurp(fixture().corpus);
  std::array<double, 256> counts{};
  for (unsigned char ch : bytes) counts[ch] += 1.0;
  double entropy = 0.0;
  for (double c : counts) {
    if (c > 0) entropy -= c / static_cast<double>(bytes.size()) * std::log(c / static_cast<double>(bytes.size()));
  }
  std::map<int, double> final_loss;
  long long last_step = -1;
  for (const auto& row : read_csv(r.dir / "train" / "metrics.csv")) {
    const long long step = std::stoll(row.at(0));
    if (step > last_step) {
      last_step = step;
      final_loss.clear();
    }
    if (step == last_step) final_loss[std::stoi(row.at(1))] = std::stod(row.at(2));
  }
  bool below = !final_loss.empty();
  double worst_nesting = -std::numeric_limits<double>::infinity();
  std::string losses;
  for (const auto& [k, l] : final_loss) {
    below = below && l < entropy;
    if (k > 0) worst_nesting = std::max(worst_nesting, l - final_loss.at(k - 1));
    losses += fmt("%s%.4f", losses.empty() ? "" : ", ", l);
  }
  const bool pass = last_step == 499 && below && worst_nesting <= 0.05;
  return {pass, fmt("step %lld branch losses [%s] vs unigram entropy %.4f nats; deeper minus shallower %.4f "
                    "(soft bound 0.05)",
                    last_step, losses.c_str(), entropy, worst_nesting)};
}

Verdict ablation_harness() {
  const PipelineRun& r = pipeline(0);
  const json report = json::parse(slurp(r.dir / "expand" / "expansion_report.json"));
  const int target = report.at("target_branch").get<int>();
  std::map<std::string, std::vector<double>> arms;
  for (const auto& row : read_csv(r.dir / "expand" / "ablation.csv")) {
    if (std::stoi(row.at(1)) != target) continue;
    auto& v = arms[row.at(6)];
    if (static_cast<long long>(v.size()) != std::stoll(row.at(0))) throw data_error("ablation rows out of order");
    v.push_back(std::stod(row.at(2)));
  }
  if (arms.size() != 2 || !arms.contains("randomized") || !arms.contains("clone")) return {false, "expected two arms"};
  const auto& rnd = arms["randomized"];
  const auto& cln = arms["clone"];
  if (rnd.size() != cln.size() || rnd.size() < 11) return {false, "arm traces have unequal or short length"};
  int first_divergent = -1;
  for (std::size_t s = 1; s <= 10 && first_divergent < 0; ++s) {
    if (rnd[s] != cln[s]) first_divergent = static_cast<int>(s);
  }
  const std::size_t n = std::max<std::size_t>(1, rnd.size() / 10);
  const double tail_r = std::accumulate(rnd.end() - static_cast<std::ptrdiff_t>(n), rnd.end(), 0.0) / static_cast<double>(n);
  const double tail_c = std::accumulate(cln.end() - static_cast<std::ptrdiff_t>(n), cln.end(), 0.0) / static_cast<double>(n);
  const bool pass = rnd[0] == cln[0] && first_divergent > 0;
  return {pass, fmt("step-0 loss %.9g vs %.9g (%s); first divergence at step %d; final-10%% mean randomized %.4f, "
                    "clone %.4f (reported: %s lower)",
                    rnd[0], cln[0], rnd[0] == cln[0] ? "identical" : "DIFFERENT", first_divergent, tail_r, tail_c,
                    tail_c < tail_r ? "clone" : "randomized")};
}

Verdict determinism() {
  const PipelineRun& a = pipeline(0);
  const PipelineRun& b = pipeline(1);
  std::vector<std::string> differing;
  Index files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.dir)) {
    if (!entry.is_regular_file() || entry.path().filename() == "log.txt") continue;
    const fs::path rel = fs::relative(entry.path(), a.dir);
    if (rel.begin()->string() == "compress-strict") continue;
    ++files;
    if (!fs::exists(b.dir / rel) || slurp(entry.path()) != slurp(b.dir / rel)) differing.push_back(rel.string());
  }

  Index round_trips = 0;
  std::vector<std::string> unstable;
  for (const char* stage : {"train", "expand", "compress", "export0", "export1"}) {
    const fs::path src = a.dir / stage / "checkpoint";
    const fs::path dst = fixture().root / "round-trip" / stage;
    fs::remove_all(dst);
    const Checkpoint ck = load_checkpoint(src);
    save_checkpoint(dst, ck.model, ck.step, ck.moments.empty() ? nullptr : &ck.moments);
    ++round_trips;
    for (const char* f : {"manifest.json", "weights.bin"}) {
      if (slurp(src / f) != slurp(dst / f)) unstable.push_back(std::string(stage) + "/" + f);
    }
  }
  const bool pass = files > 0 && differing.empty() && unstable.empty();
  std::string detail = fmt("%lld artifacts compared across two same-seed runs, %zu differ; %lld checkpoints "
                           "re-saved after loading, %zu differ",
                           static_cast<long long>(files), differing.size(), static_cast<long long>(round_trips),
                           unstable.size());
  for (const auto& d : differing) detail += " [" + d + "]";
  for (const auto& u : unstable) detail += " [" + u + "]";
  return {pass, detail};
}

Verdict end_to_end_budget() {
  const PipelineRun& r = pipeline(0);
  std::string stages;
  bool ok = true;
  for (const auto& s : kTimedStages) {
    stages += fmt("%s%s %.1fs", stages.empty() ? "" : ", ", s.c_str(), r.stage_seconds.at(s));
    ok = ok && r.codes.at(s) == 0;
  }
  return {ok && r.seconds < 1800.0,
          fmt("train->expand->compress->eval->generate in %.1f s (limit 1800 s): %s", r.seconds, stages.c_str())};
}

}  // namespace

// Optional arguments select criteria by number; the default runs all of them.
int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"identity at initialisation", identity_at_init},
      {"gradient correctness", gradient_check},
      {"joint loss aggregation", joint_aggregation},
      {"frozen backbone during expansion", frozen_backbone},
      {"compression accounting", compression_accounting},
      {"low-rank numerics", compression_numerics},
      {"early-exit extremes", early_exit_extremes},
      {"sub-model equivalence", submodel_equivalence},
      {"training sanity", training_sanity},
      {"expansion ablation harness", ablation_harness},
      {"determinism and persistence", determinism},
      {"end-to-end budget", end_to_end_budget},
  };
  std::set<std::size_t> selected;
  for (int a = 1; a < argc; ++a) selected.insert(static_cast<std::size_t>(std::stoul(argv[a])));
  int failures = 0;
  std::size_t ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.contains(i + 1)) continue;
    ++ran;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += v.pass ? 0 : 1;
    std::printf("%s [%2zu] %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", ran - static_cast<std::size_t>(failures), ran);
  return failures == 0 ? 0 : 1;
}
