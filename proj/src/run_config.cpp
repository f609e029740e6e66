// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/run_config.hpp"

#include <fstream>

#include "familykit/error.hpp"

namespace familykit {

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  read_optional(j, key, fallback, where);
  return fallback;
}

std::uint64_t parse_seed(const json& v, const std::string& where) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(v.get<std::int64_t>());
  throw config_error(where + " must be a non-negative integer");
}

std::uint64_t parse_seed_text(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-') {
    throw config_error(where + " must be a non-negative integer, got '" + text + "'");
  }
  return v;
}

LambdaSchedule parse_lambda(const json& j, const FamilyConfig& model, std::int64_t total_steps) {
  const std::string where = "lambda";
  require_known_keys(j, {"kind", "initial", "final", "main_branch"}, where);
  LambdaSchedule s = LambdaSchedule::default_for(model.exits(), total_steps);
  if (j.contains("kind")) s.kind = lambda_kind_from_string(get_or<std::string>(j, "kind", "", where));
  read_optional(j, "initial", s.initial, where);
  read_optional(j, "final", s.final, where);
  read_optional(j, "main_branch", s.main_branch, where);
  if (static_cast<int>(s.initial.size()) != model.exits()) throw config_error("lambda: one weight per exit required");
  s.validate();
  return s;
}

void parse_expansion(const json& j, ExpansionSettings& e) {
  const std::string where = "expansion";
  require_known_keys(j,
                     {"target_branch", "n_new_blocks", "init_mode", "clone_source", "gaussian_std", "seed", "ablate",
                      "train"},
                     where);
  read_optional(j, "target_branch", e.spec.target_branch, where);
  read_optional(j, "n_new_blocks", e.spec.n_new_blocks, where);
  if (j.contains("init_mode")) e.spec.init_mode = init_mode_from_string(get_or<std::string>(j, "init_mode", "", where));
  read_optional(j, "clone_source", e.spec.clone_source, where);
  read_optional(j, "gaussian_std", e.spec.gaussian_std, where);
  if (j.contains("seed")) {
    e.spec.seed = parse_seed(j.at("seed"), "expansion.seed");
    e.seed_given = true;
  }
  read_optional(j, "ablate", e.ablate, where);
  if (j.contains("train")) from_json(j.at("train"), e.train);
  e.train.validate();
}

void parse_compression(const json& j, CompressionSettings& c) {
  const std::string where = "compression";
  require_known_keys(j,
                     {"ratio", "ridge_rel", "min_ratio", "max_ratio", "budget_correction", "batches", "batch",
                      "seq_len", "scope", "tolerance"},
                     where);
  read_optional(j, "ratio", c.options.ratio, where);
  read_optional(j, "ridge_rel", c.options.ridge_rel, where);
  read_optional(j, "min_ratio", c.options.min_ratio, where);
  read_optional(j, "max_ratio", c.options.max_ratio, where);
  read_optional(j, "budget_correction", c.options.budget_correction, where);
  read_optional(j, "batches", c.batches, where);
  read_optional(j, "batch", c.batch, where);
  read_optional(j, "seq_len", c.seq_len, where);
  read_optional(j, "scope", c.scope, where);
  read_optional(j, "tolerance", c.tolerance, where);
  if (!(c.options.ratio > 0.0 && c.options.ratio < 1.0)) throw config_error("compression.ratio must lie in (0, 1)");
  if (c.batches < 1 || c.batch < 1 || c.seq_len < 2) throw config_error("compression calibration size must be positive");
  if (c.scope != "expanded" && c.scope != "all") throw config_error("compression.scope must be 'expanded' or 'all'");
  if (!(c.tolerance >= 0.0)) throw config_error("compression.tolerance must be >= 0");
  if (!(c.options.ridge_rel >= 0.0)) throw config_error("compression.ridge_rel must be >= 0");
}

void parse_generate(const json& j, GenerateSettings& g) {
  const std::string where = "generate";
  require_known_keys(j, {"threshold", "allowed", "mode", "temperature", "seed", "backfill", "max_new", "prompt"}, where);
  read_optional(j, "threshold", g.policy.threshold, where);
  read_optional(j, "allowed", g.policy.allowed, where);
  if (j.contains("mode")) g.policy.mode = decode_mode_from_string(get_or<std::string>(j, "mode", "", where));
  read_optional(j, "temperature", g.policy.temperature, where);
  if (j.contains("seed")) {
    g.policy.seed = parse_seed(j.at("seed"), "generate.seed");
    g.seed_given = true;
  }
  if (j.contains("backfill")) g.policy.backfill = backfill_from_string(get_or<std::string>(j, "backfill", "", where));
  read_optional(j, "max_new", g.max_new, where);
  read_optional(j, "prompt", g.prompt, where);
  if (g.max_new < 0) throw config_error("generate.max_new must be >= 0");
}

void parse_paths(const json& j, Paths& p) {
  const std::string where = "paths";
  require_known_keys(j, {"corpus", "eval_corpus", "calibration", "checkpoint", "text", "out"}, where);
  auto path = [&](const char* key, std::filesystem::path& out) {
    if (j.contains(key)) out = get_or<std::string>(j, key, "", where);
  };
  path("corpus", p.corpus);
  path("eval_corpus", p.eval_corpus);
  path("calibration", p.calibration);
  path("checkpoint", p.checkpoint);
  path("text", p.text);
  path("out", p.out);
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  j = json{{"peak_lr", c.peak_lr},           {"warmup_steps", c.warmup_steps}, {"total_steps", c.total_steps},
           {"batch", c.batch},               {"seq_len", c.seq_len},           {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},               {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
           {"grad_clip_norm", c.grad_clip_norm}};
  if (c.stop_step) j["stop_step"] = *c.stop_step;
}

void from_json(const json& j, TrainConfig& c) {
  const std::string where = "train";
  require_known_keys(j,
                     {"peak_lr", "warmup_steps", "total_steps", "batch", "seq_len", "weight_decay", "beta1", "beta2",
                      "adam_eps", "grad_clip_norm", "stop_step"},
                     where);
  read_optional(j, "peak_lr", c.peak_lr, where);
  read_optional(j, "warmup_steps", c.warmup_steps, where);
  read_optional(j, "total_steps", c.total_steps, where);
  read_optional(j, "batch", c.batch, where);
  read_optional(j, "seq_len", c.seq_len, where);
  read_optional(j, "weight_decay", c.weight_decay, where);
  read_optional(j, "beta1", c.beta1, where);
  read_optional(j, "beta2", c.beta2, where);
  read_optional(j, "adam_eps", c.adam_eps, where);
  read_optional(j, "grad_clip_norm", c.grad_clip_norm, where);
  if (j.contains("stop_step")) {
    if (j.at("stop_step").is_null()) {
      c.stop_step.reset();
    } else {
      c.stop_step = get_or<std::int64_t>(j, "stop_step", 0, where);
    }
  }
}

LambdaSchedule RunConfig::lambda_schedule() const {
  if (lambda) return *lambda;
  return LambdaSchedule::default_for(model.exits(), train.total_steps);
}

void apply_override(json& doc, const std::string& path, const std::string& value) {
  if (path.empty() || path.front() == '.' || path.back() == '.' || path.find("..") != std::string::npos) {
    throw config_error("malformed override key '" + path + "'");
  }
  if (!doc.is_object()) throw config_error("config document must be a JSON object");
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[key] = parsed.is_discarded() ? json(value) : std::move(parsed);
      return;
    }
    json& child = (*node)[key];
    if (child.is_null()) child = json::object();
    if (!child.is_object()) throw config_error("override '" + path + "' descends into non-object '" + key + "'");
    node = &child;
    start = dot + 1;
  }
}

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string a = args[i];
    if (a.starts_with("--")) a = a.substr(2);
    const std::size_t eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(0, eq), a.substr(eq + 1));
    } else if (i + 1 < args.size() && !args[i + 1].starts_with("--")) {
      out.emplace_back(a, args[++i]);
    } else {
      throw config_error("override '" + args[i] + "' has no value");
    }
    if (out.back().first.find('.') == std::string::npos && out.back().first != "seed") {
      throw config_error("unknown option '--" + out.back().first + "'");
    }
  }
  return out;
}

json read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file " + path.string());
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw config_error("config file " + path.string() + " is not valid JSON");
  if (!doc.is_object()) throw config_error("config file " + path.string() + " must hold a JSON object");
  return doc;
}

RunConfig parse_run_config(const json& doc, const char* env_seed) {
  require_known_keys(doc,
                     {"seed", "model", "train", "lambda", "expansion", "compression", "generate", "eval", "analyze",
                      "export", "paths"},
                     "config");
  RunConfig rc;
  if (doc.contains("seed")) {
    rc.seed = parse_seed(doc.at("seed"), "seed");
  } else if (env_seed && *env_seed) {
    rc.seed = parse_seed_text(env_seed, "FAMILYKIT_SEED");
  } else {
    throw config_error("no seed: set \"seed\" in the config or FAMILYKIT_SEED");
  }
  if (doc.contains("model")) {
    rc.model = doc.at("model").get<FamilyConfig>();
    rc.model_given = true;
  }
  rc.model.validate();
  if (doc.contains("train")) from_json(doc.at("train"), rc.train);
  rc.train.validate();
  if (doc.contains("lambda")) rc.lambda = parse_lambda(doc.at("lambda"), rc.model, rc.train.total_steps);

  rc.expansion.train.total_steps = 300;
  rc.expansion.train.warmup_steps = 20;
  if (doc.contains("expansion")) parse_expansion(doc.at("expansion"), rc.expansion);
  if (!rc.expansion.seed_given) rc.expansion.spec.seed = rc.seed;
  rc.expansion.train.validate();

  if (doc.contains("compression")) parse_compression(doc.at("compression"), rc.compression);
  if (doc.contains("generate")) parse_generate(doc.at("generate"), rc.generate);
  if (!rc.generate.seed_given) rc.generate.policy.seed = rc.seed;
  if (doc.contains("eval")) {
    const json& j = doc.at("eval");
    require_known_keys(j, {"window", "batch"}, "eval");
    read_optional(j, "window", rc.eval.window, "eval");
    read_optional(j, "batch", rc.eval.batch, "eval");
    if (rc.eval.window < 2 || rc.eval.batch < 1) throw config_error("eval.window >= 2 and eval.batch >= 1 required");
  }
  if (doc.contains("analyze")) {
    const json& j = doc.at("analyze");
    require_known_keys(j, {"branch", "text"}, "analyze");
    read_optional(j, "branch", rc.analyze.branch, "analyze");
    read_optional(j, "text", rc.analyze.text, "analyze");
  }
  if (doc.contains("export")) {
    const json& j = doc.at("export");
    require_known_keys(j, {"branch"}, "export");
    read_optional(j, "branch", rc.export_branch, "export");
  }
  if (doc.contains("paths")) parse_paths(doc.at("paths"), rc.paths);
  return rc;
}

}  // namespace familykit
