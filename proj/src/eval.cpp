// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#include "familykit/eval.hpp"

#include <cmath>

#include "familykit/error.hpp"

namespace familykit {

double Perplexity::perplexity() const { return std::exp(mean_nll); }

namespace {

std::vector<Perplexity> finish(const std::vector<double>& sums, const std::vector<Index>& counts) {
  std::vector<Perplexity> out(sums.size());
  for (std::size_t k = 0; k < sums.size(); ++k) {
    if (counts[k] == 0) throw data_error("evaluation text has no predictable positions");
    out[k] = {sums[k] / static_cast<double>(counts[k]), counts[k]};
  }
  return out;
}

}  // namespace

std::vector<Perplexity> family_perplexity(const FamilialModel<float>& model, std::span<const TokenId> tokens,
                                          Index window, Index batch) {
  const auto batches = eval_batches(tokens, window, batch);
  const auto k = static_cast<std::size_t>(model.config.exits());
  std::vector<double> sums(k, 0.0);
  std::vector<Index> counts(k, 0);
  for (const auto& b : batches) {
    const auto targets = next_token_targets(b);
    const auto logits = forward_all_branches(model, b);
    for (std::size_t e = 0; e < k; ++e) {
      Index n = 0;
      const double mean = cross_entropy_value(logits[e], targets, -1, &n);
      sums[e] += mean * static_cast<double>(n);
      counts[e] += n;
    }
  }
  return finish(sums, counts);
}

Perplexity branch_perplexity(const FamilialModel<float>& model, std::span<const TokenId> tokens, int branch,
                             Index window, Index batch) {
  std::vector<double> sum{0.0};
  std::vector<Index> count{0};
  for (const auto& b : eval_batches(tokens, window, batch)) {
    Index n = 0;
    const double mean = cross_entropy_value(forward_branch(model, b, branch), next_token_targets(b), -1, &n);
    sum[0] += mean * static_cast<double>(n);
    count[0] += n;
  }
  return finish(sum, count)[0];
}

}  // namespace familykit
