// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_CONFIG_HPP
#define FAMILYKIT_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace familykit {

/// Architecture of a multi-exit decoder family.
struct FamilyConfig {
  int n_layers = 4;
  int hidden = 32;
  int q_heads = 4;
  int kv_heads = 2;
  int vocab = 259;
  int ctx_len = 64;
  /// Backbone depth at which each exit head taps the residual stream; the last
  /// entry equals n_layers.
  std::vector<int> exit_depths{2, 4};
  /// Branch-specific decoder blocks in every exit head.
  int branch_blocks = 1;
  /// Blocks appended to each exit head by block expansion (empty == all zero).
  std::vector<int> expanded_blocks;
  int mlp_mult = 4;
  double rms_eps = 1e-5;
  double rope_base = 10000.0;

  int exits() const { return static_cast<int>(exit_depths.size()); }
  int head_dim() const { return hidden / q_heads; }
  int kv_dim() const { return head_dim() * kv_heads; }
  int mlp_hidden() const { return hidden * mlp_mult; }
  int expanded(int exit) const {
    return expanded_blocks.empty() ? 0 : expanded_blocks[static_cast<std::size_t>(exit)];
  }

  /// Throws a config error describing the first violated invariant.
  void validate() const;

  bool operator==(const FamilyConfig&) const = default;
};

/// Desk reference configuration.
FamilyConfig desk_config();

/// Short stable hash of the canonical JSON form, printed on compatibility errors.
std::string fingerprint(const FamilyConfig& c);

}  // namespace familykit

#endif  // FAMILYKIT_CONFIG_HPP
