// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

// familykit {train|expand|compress|eval|generate|analyze|export}
//           [--config <path>] [--out <dir>] [--section.key=value ...]

#include <cstdlib>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "familykit/error.hpp"
#include "familykit/pipeline.hpp"
#include "familykit/run_config.hpp"

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string corpus;
  std::string init;
  bool ablate = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-exit decoder family toolkit"};
  app.require_subcommand(1);
  Flags flags;
  const std::map<std::string, std::string> help{
      {"train", "joint training of every exit"},
      {"expand", "append blocks to one exit and train them over a frozen model"},
      {"compress", "whitened low-rank compression of the expanded blocks"},
      {"eval", "per-exit perplexity"},
      {"generate", "early-exit text generation"},
      {"analyze", "per-layer input/output cosine similarity"},
      {"export", "standalone single-exit checkpoint"}};
  for (const auto& name : familykit::command_names()) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--config", flags.config, "JSON run configuration");
    sub->add_option("--out", flags.out, "artifact directory (paths.out)");
    sub->add_option("--checkpoint", flags.checkpoint, "input checkpoint directory (paths.checkpoint)");
    sub->add_option("--corpus", flags.corpus, "training corpus (paths.corpus)");
    if (name == "expand") {
      sub->add_option("--init", flags.init, "randomized or clone (expansion.init_mode)");
      sub->add_flag("--ablate", flags.ablate, "also train both init modes and write ablation.csv");
    }
    sub->allow_extras();
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  familykit::RunConfig rc;
  try {
    familykit::json doc = flags.config.empty() ? familykit::json::object() : familykit::read_config_file(flags.config);
    for (const auto& [key, value] : familykit::parse_overrides(sub->remaining())) {
      familykit::apply_override(doc, key, value);
    }
    if (!flags.out.empty()) familykit::apply_override(doc, "paths.out", familykit::json(flags.out).dump());
    if (!flags.checkpoint.empty()) familykit::apply_override(doc, "paths.checkpoint", familykit::json(flags.checkpoint).dump());
    if (!flags.corpus.empty()) familykit::apply_override(doc, "paths.corpus", familykit::json(flags.corpus).dump());
    if (!flags.init.empty()) familykit::apply_override(doc, "expansion.init_mode", familykit::json(flags.init).dump());
    if (flags.ablate) familykit::apply_override(doc, "expansion.ablate", "true");
    rc = familykit::parse_run_config(doc, std::getenv("FAMILYKIT_SEED"));
  } catch (const familykit::Error& e) {
    std::cerr << e.what() << '\n';
    return e.exit_code();
  }
  return familykit::run_command(command, rc, std::cout, std::cerr);
}
