// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/pipeline.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "familykit/checkpoint.hpp"
#include "familykit/data.hpp"
#include "familykit/error.hpp"

namespace familykit {

namespace fs = std::filesystem;

namespace {

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw config_error(what + " path is not set (paths." + what + ")");
  if (!fs::exists(p)) throw config_error(what + " " + p.string() + " does not exist");
}

fs::path output_dir(const RunConfig& rc) {
  if (rc.paths.out.empty()) throw config_error("output directory is not set (--out or paths.out)");
  fs::create_directories(rc.paths.out);
  return rc.paths.out;
}

std::ofstream open_output(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream out(p, mode | std::ios::binary);
  if (!out) throw data_error("cannot write " + p.string());
  return out;
}

Checkpoint load_checked(const RunConfig& rc) {
  require_file(rc.paths.checkpoint, "checkpoint");
  Checkpoint ck = load_checkpoint(rc.paths.checkpoint);
  check_compatible(rc, ck.model.config);
  return ck;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void log_step(std::ostream& log, const StepMetrics& m) {
  log << "step " << m.step;
  for (std::size_t k = 0; k < m.branch_loss.size(); ++k) log << " loss[" << k << "]=" << fixed(m.branch_loss[k], 4);
  log << " lr=" << fixed(m.lr, 6) << '\n';
}

bool in_all_scope(const std::string& name) {
  if (name.ends_with(".lm_proj")) return true;
  const std::string leaf = name.substr(name.rfind('.') + 1);
  return std::find(kBlockMatrices.begin(), kBlockMatrices.end(), leaf) != kBlockMatrices.end();
}

}  // namespace

void check_compatible(const RunConfig& rc, const FamilyConfig& checkpoint) {
  if (!rc.model_given) return;
  FamilyConfig a = rc.model;
  FamilyConfig b = checkpoint;
  a.expanded_blocks.clear();
  b.expanded_blocks.clear();
  if (a != b) {
    throw integrity_error("checkpoint architecture " + fingerprint(b) + " does not match configured model " +
                          fingerprint(a));
  }
}

TrainOutcome cmd_train(const RunConfig& rc, std::ostream& log) {
  require_file(rc.paths.corpus, "corpus");
  const bool resume = !rc.paths.checkpoint.empty();
  TrainState st;
  if (resume) {
    Checkpoint ck = load_checked(rc);
    st.model = std::move(ck.model);
    st.moments = std::move(ck.moments);
    st.step = ck.step;
  } else {
    st.model = init_model<float>(rc.model, rc.seed);
  }
  const std::vector<TokenId> tokens = read_corpus(rc.paths.corpus);
  const WindowSampler sampler(tokens, rc.train.seq_len, rc.train.batch, rc.seed);
  const LambdaSchedule schedule = rc.lambda_schedule();
  const fs::path out = output_dir(rc);

  const fs::path metrics_path = out / "metrics.csv";
  const bool append = resume && fs::exists(metrics_path);
  std::ofstream metrics = open_output(metrics_path, append ? std::ios::app : std::ios::trunc);
  MetricsWriter writer(metrics, false, !append);

  TrainOutcome result;
  result.unigram_entropy = unigram_entropy(tokens);
  log << "corpus: " << tokens.size() << " tokens, unigram entropy " << fixed(result.unigram_entropy, 4) << " nats\n";
  const std::int64_t end = rc.train.stop_step.value_or(rc.train.total_steps);
  if (st.step > end) throw config_error("checkpoint is at step " + std::to_string(st.step) + ", past the requested end");
  while (st.step < end) {
    const StepMetrics m = train_step(st, rc.train, schedule, sampler.batch_at(st.step));
    writer.write(m);
    result.final_loss = m.branch_loss;
    if (m.step % 50 == 0 || st.step == end) log_step(log, m);
  }
  metrics.close();
  save_checkpoint(out / "checkpoint", st);
  result.step = st.step;
  log << "checkpoint: " << (out / "checkpoint").string() << " at step " << st.step << '\n';
  return result;
}

ExpansionReport cmd_expand(const RunConfig& rc, std::ostream& log) {
  require_file(rc.paths.corpus, "corpus");
  const Checkpoint ck = load_checked(rc);
  const std::vector<TokenId> tokens = read_corpus(rc.paths.corpus);
  const fs::path out = output_dir(rc);
  const ExpansionSettings& xs = rc.expansion;
  const std::string backbone_before = parameter_hash(ck.model, "backbone.");

  Expanded e = expand(ck.model, xs.spec);
  log << "identity deviation at init: " << (e.report.identity_deviation == 0.0 ? "0.0" : format_double(e.report.identity_deviation))
      << '\n';
  log << "added " << e.report.added_parameters << " parameters, branch " << xs.spec.target_branch << " depth "
      << e.report.depth_before << " -> " << e.report.depth_after << '\n';

  TrainState st{std::move(e.model), {}, 0, {}};
  const LambdaSchedule schedule = expansion_schedule(st.model.config, xs.spec.target_branch, xs.train.total_steps);
  const WindowSampler sampler(tokens, xs.train.seq_len, xs.train.batch, rc.seed);
  {
    std::ofstream metrics = open_output(out / "metrics.csv");
    MetricsWriter writer(metrics);
    const std::int64_t end = xs.train.stop_step.value_or(xs.train.total_steps);
    while (st.step < end) {
      const StepMetrics m = train_step(st, xs.train, schedule, sampler.batch_at(st.step));
      writer.write(m);
      if (m.step % 50 == 0 || st.step == end) log_step(log, m);
    }
  }
  save_checkpoint(out / "checkpoint", st.model, st.step);

  const std::string backbone_after = parameter_hash(st.model, "backbone.");
  json report{{"identity_deviation", e.report.identity_deviation},
              {"added_parameters", e.report.added_parameters},
              {"depth_before", e.report.depth_before},
              {"depth_after", e.report.depth_after},
              {"target_branch", xs.spec.target_branch},
              {"init_mode", to_string(xs.spec.init_mode)},
              {"trainable", e.report.trainable},
              {"frozen_parameters", e.report.frozen_parameters},
              {"backbone_hash_before", backbone_before},
              {"backbone_hash_after", backbone_after}};
  open_output(out / "expansion_report.json") << report.dump(2) << '\n';
  log << "backbone hash " << backbone_before << (backbone_before == backbone_after ? " unchanged" : " CHANGED") << '\n';

  if (xs.ablate) {
    std::ofstream trace = open_output(out / "ablation.csv");
    MetricsWriter writer(trace, true);
    const AblationResult r = ablation_run(ck.model, tokens, xs.spec, xs.train, rc.seed, &writer);
    auto tail_mean = [](const std::vector<double>& v) {
      const std::size_t n = std::max<std::size_t>(1, v.size() / 10);
      double s = 0.0;
      for (std::size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
      return s / static_cast<double>(n);
    };
    const double rnd = tail_mean(r.randomized);
    const double cln = tail_mean(r.clone);
    log << "ablation: step-0 loss randomized " << fixed(r.randomized.front(), 6) << ", clone " << fixed(r.clone.front(), 6)
        << "; final-10% mean randomized " << fixed(rnd, 4) << ", clone " << fixed(cln, 4) << " ("
        << (cln < rnd ? "clone lower" : "randomized lower or equal") << ")\n";
  }
  return e.report;
}

CompressOutcome cmd_compress(const RunConfig& rc, std::ostream& log) {
  const Checkpoint ck = load_checked(rc);
  // Calibration text: paths.calibration, else the held-out eval corpus, else the training corpus.
  const char* calib_key = !rc.paths.calibration.empty() ? "calibration"
                          : !rc.paths.eval_corpus.empty() ? "eval_corpus"
                                                          : "corpus";
  const fs::path calib_path = !rc.paths.calibration.empty() ? rc.paths.calibration
                              : !rc.paths.eval_corpus.empty() ? rc.paths.eval_corpus
                                                              : rc.paths.corpus;
  require_file(calib_path, calib_key);
  const fs::path eval_path = rc.paths.eval_corpus.empty() ? calib_path : rc.paths.eval_corpus;
  require_file(eval_path, "eval_corpus");
  const CompressionSettings& cs = rc.compression;
  const FamilyConfig& config = ck.model.config;

  MatrixPredicate scope;
  if (cs.scope == "expanded") {
    bool any = false;
    for (int k = 0; k < config.exits(); ++k) any = any || config.expanded(k) > 0;
    if (!any) throw config_error("compression scope 'expanded' needs an expanded checkpoint");
    scope = [&config](const std::string& n) { return in_expanded_scope(config, n); };
  } else {
    scope = in_all_scope;
  }

  const std::vector<TokenId> calib_tokens = read_corpus(calib_path);
  const WindowSampler sampler(calib_tokens, cs.seq_len, cs.batch, CounterRng(rc.seed).split("calibration").next_u64());
  std::vector<TokenBatch> batches;
  for (Index i = 0; i < cs.batches; ++i) batches.push_back(sampler.batch_at(i));
  const CalibrationSet calib = capture_activations(ck.model, batches, scope);

  CompressOutcome result;
  result.plan = build_plan(ck.model, calib, cs.options);
  if (result.plan.entries.empty()) throw config_error("compression scope selects no matrices");
  const FamilialModel<float> compressed = apply_compression(ck.model, result.plan);
  const fs::path out = output_dir(rc);
  save_checkpoint(out / "checkpoint", compressed, ck.step);

  const std::vector<TokenId> eval_tokens = read_corpus(eval_path);
  result.report = measure_compression(ck.model, compressed, result.plan, eval_tokens, rc.eval.window);
  {
    std::ofstream plan_json = open_output(out / "plan.json");
    write_plan_json(plan_json, result.plan);
    std::ofstream csv = open_output(out / "compression_report.csv");
    write_report_csv(csv, result.report);
    std::ofstream txt = open_output(out / "compression_report.txt");
    write_report_text(txt, result.report, result.plan);
  }
  write_report_text(log, result.report, result.plan);

  const double achieved = result.plan.achieved_removal();
  if (std::abs(achieved - cs.options.ratio) > cs.tolerance) {
    throw numeric_error("achieved removal " + fixed(100.0 * achieved, 2) + "% misses the target " +
                        fixed(100.0 * cs.options.ratio, 2) + "% by more than " + fixed(100.0 * cs.tolerance, 2) +
                        " points");
  }
  return result;
}

std::vector<Perplexity> cmd_eval(const RunConfig& rc, std::ostream& log) {
  const Checkpoint ck = load_checked(rc);
  const fs::path eval_path = rc.paths.eval_corpus.empty() ? rc.paths.corpus : rc.paths.eval_corpus;
  require_file(eval_path, "eval_corpus");
  const std::vector<TokenId> tokens = read_corpus(eval_path);
  const std::vector<Perplexity> ppl = family_perplexity(ck.model, tokens, rc.eval.window, rc.eval.batch);
  const fs::path out = output_dir(rc);
  std::ofstream csv = open_output(out / "perplexity.csv");
  csv << "branch,exit_depth,tokens,mean_nll,perplexity\n";
  log << "branch  depth  tokens    mean_nll  perplexity\n";
  for (std::size_t k = 0; k < ppl.size(); ++k) {
    const int depth = ck.model.config.exit_depths[k];
    csv << k << ',' << depth << ',' << ppl[k].tokens << ',' << format_double(ppl[k].mean_nll) << ','
        << format_double(ppl[k].perplexity()) << '\n';
    char line[128];
    std::snprintf(line, sizeof line, "%6zu  %5d  %6lld  %10.6f  %10.4f\n", k, depth, static_cast<long long>(ppl[k].tokens),
                  ppl[k].mean_nll, ppl[k].perplexity());
    log << line;
  }
  return ppl;
}

GenerationTrace cmd_generate(const RunConfig& rc, std::ostream& log) {
  const Checkpoint ck = load_checked(rc);
  std::vector<TokenId> prompt = ByteTokenizer::encode(rc.generate.prompt);
  if (prompt.empty()) prompt.push_back(ByteTokenizer::kBos);
  const GenerationTrace trace = generate(ck.model, prompt, rc.generate.policy, rc.generate.max_new);
  const fs::path out = output_dir(rc);
  const std::string text = ByteTokenizer::decode(prompt) + ByteTokenizer::decode(trace.tokens());
  open_output(out / "generation.txt") << text;
  {
    std::ofstream jsonl = open_output(out / "trace.jsonl");
    write_trace_jsonl(jsonl, trace);
  }
  log << text << '\n';
  if (trace.truncated) log << "generation truncated at the context length\n";
  const ExitHistogram h = exit_histogram(trace);
  for (const auto& [depth, count] : h.counts) log << "exit depth " << depth << ": " << count << " tokens\n";
  log << "mean exit depth " << fixed(h.mean_depth, 3) << '\n';
  return trace;
}

CosineMap cmd_analyze(const RunConfig& rc, std::ostream& log) {
  const Checkpoint ck = load_checked(rc);
  std::string text = rc.analyze.text;
  if (!rc.paths.text.empty()) {
    require_file(rc.paths.text, "text");
    std::ifstream in(rc.paths.text, std::ios::binary);
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  const std::vector<TokenId> ids = ByteTokenizer::encode(text);
  if (ids.empty()) throw data_error("analysis text is empty");
  const CosineMap map = layer_cosine_similarity(ck.model, ids, rc.analyze.branch);
  const fs::path out = output_dir(rc);
  std::ofstream csv = open_output(out / "cosine.csv");
  write_cosine_csv(csv, map, ids);
  for (std::size_t b = 0; b < map.blocks.size(); ++b) {
    log << map.blocks[b] << " mean cosine " << fixed(map.scores.row(static_cast<Index>(b)).mean(), 4) << '\n';
  }
  if (map.degenerate) log << "warning: zero-norm hidden state encountered\n";
  return map;
}

void cmd_export(const RunConfig& rc, std::ostream& log) {
  const Checkpoint ck = load_checked(rc);
  const FamilialModel<float> sub = extract_submodel(ck.model, rc.export_branch);
  const fs::path out = output_dir(rc);
  save_checkpoint(out / "checkpoint", sub, ck.step);
  log << "exported branch " << rc.export_branch << ": " << param_count(sub).total << " parameters\n";
}

int run_command(const std::string& command, const RunConfig& rc, std::ostream& log, std::ostream& err) {
  try {
    if (command == "train") {
      cmd_train(rc, log);
    } else if (command == "expand") {
      cmd_expand(rc, log);
    } else if (command == "compress") {
      cmd_compress(rc, log);
    } else if (command == "eval") {
      cmd_eval(rc, log);
    } else if (command == "generate") {
      cmd_generate(rc, log);
    } else if (command == "analyze") {
      cmd_analyze(rc, log);
    } else if (command == "export") {
      cmd_export(rc, log);
    } else {
      throw config_error("unknown command '" + command + "'");
    }
  } catch (const Error& e) {
    err << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace familykit
