// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_EVAL_HPP
#define FAMILYKIT_EVAL_HPP

#include <span>
#include <vector>

#include "familykit/data.hpp"
#include "familykit/forward.hpp"
#include "familykit/model.hpp"

namespace familykit {

struct Perplexity {
  double mean_nll = 0.0;  // nats per predicted token
  Index tokens = 0;       // predicted positions
  double perplexity() const;
};

/// Windowed causal evaluation of every exit: the token stream is cut into
/// consecutive windows, each predicting its own next tokens.
std::vector<Perplexity> family_perplexity(const FamilialModel<float>& model, std::span<const TokenId> tokens,
                                          Index window, Index batch = 8);

Perplexity branch_perplexity(const FamilialModel<float>& model, std::span<const TokenId> tokens, int branch,
                             Index window, Index batch = 8);

}  // namespace familykit

#endif  // FAMILYKIT_EVAL_HPP
