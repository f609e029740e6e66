// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/config.hpp"

#include <cstdio>

#include "familykit/error.hpp"
#include "familykit/json_io.hpp"

namespace familykit {

void FamilyConfig::validate() const {
  auto fail = [](const std::string& m) { throw config_error("model: " + m); };
  if (n_layers < 0) fail("n_layers must be >= 0");
  if (hidden < 1 || q_heads < 1 || kv_heads < 1) fail("hidden, q_heads and kv_heads must be positive");
  if (q_heads % kv_heads != 0) fail("q_heads must be divisible by kv_heads");
  if (hidden % q_heads != 0) fail("hidden must be divisible by q_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (vocab < 2) fail("vocab must be >= 2");
  if (ctx_len < 1) fail("ctx_len must be >= 1");
  if (mlp_mult < 1) fail("mlp_mult must be >= 1");
  if (!(rms_eps > 0.0)) fail("rms_eps must be positive");
  if (!(rope_base > 0.0)) fail("rope_base must be positive");
  if (branch_blocks < 0) fail("branch_blocks must be >= 0");
  if (exit_depths.empty()) fail("exit_depths must be nonempty");
  if (exit_depths.back() != n_layers) fail("last exit depth must equal n_layers");
  if (n_layers > 0 && exit_depths.front() < 1) fail("exit depths must be >= 1");
  for (std::size_t i = 1; i < exit_depths.size(); ++i) {
    if (exit_depths[i] <= exit_depths[i - 1]) fail("exit_depths must be strictly increasing");
  }
  if (!expanded_blocks.empty()) {
    if (expanded_blocks.size() != exit_depths.size()) fail("expanded_blocks needs one entry per exit");
    for (int e : expanded_blocks) {
      if (e < 0) fail("expanded_blocks entries must be >= 0");
    }
  }
}

FamilyConfig desk_config() { return FamilyConfig{}; }

void to_json(json& j, const FamilyConfig& c) {
  j = json{{"n_layers", c.n_layers},       {"hidden", c.hidden},
           {"q_heads", c.q_heads},         {"kv_heads", c.kv_heads},
           {"vocab", c.vocab},             {"ctx_len", c.ctx_len},
           {"exit_depths", c.exit_depths}, {"branch_blocks", c.branch_blocks},
           {"expanded_blocks", c.expanded_blocks}, {"mlp_mult", c.mlp_mult},
           {"rms_eps", c.rms_eps},         {"rope_base", c.rope_base}};
}

void from_json(const json& j, FamilyConfig& c) {
  const std::string where = "model";
  require_known_keys(j,
                     {"n_layers", "hidden", "q_heads", "kv_heads", "vocab", "ctx_len", "exit_depths", "branch_blocks",
                      "expanded_blocks", "mlp_mult", "rms_eps", "rope_base"},
                     where);
  read_optional(j, "n_layers", c.n_layers, where);
  read_optional(j, "hidden", c.hidden, where);
  read_optional(j, "q_heads", c.q_heads, where);
  read_optional(j, "kv_heads", c.kv_heads, where);
  read_optional(j, "vocab", c.vocab, where);
  read_optional(j, "ctx_len", c.ctx_len, where);
  read_optional(j, "exit_depths", c.exit_depths, where);
  read_optional(j, "branch_blocks", c.branch_blocks, where);
  read_optional(j, "expanded_blocks", c.expanded_blocks, where);
  read_optional(j, "mlp_mult", c.mlp_mult, where);
  read_optional(j, "rms_eps", c.rms_eps, where);
  read_optional(j, "rope_base", c.rope_base, where);
}

std::string fingerprint(const FamilyConfig& c) {
  const std::string text = json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace familykit
