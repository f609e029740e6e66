// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_FORWARD_HPP
#define FAMILYKIT_FORWARD_HPP

#include <functional>
#include <string>
#include <vector>

#include "familykit/autograd.hpp"
#include "familykit/model.hpp"

namespace familykit {

/// `batch` sequences of `seq` tokens, row-major.
struct TokenBatch {
  std::vector<TokenId> ids;
  Index batch = 1;
  Index seq = 0;
};

/// Optional observers called during a forward pass.
template <typename Scalar>
struct ForwardHooks {
  /// Input rows of every linear layer, keyed by the dense parameter name.
  std::function<void(const std::string& matrix, const Matrix<Scalar>& input)> linear_input;
  /// Residual stream entering and leaving every decoder block.
  std::function<void(const std::string& block, const Matrix<Scalar>& in, const Matrix<Scalar>& out)> block;
};

/// One forward pass of a FamilialModel recorded on a tape.
template <typename Scalar>
class Forward {
 public:
  Forward(Tape<Scalar>& tape, const FamilialModel<Scalar>& model, const TokenBatch& tokens, bool grad_enabled,
          const ForwardHooks<Scalar>* hooks = nullptr)
      : tape_(tape), model_(model), tokens_(tokens), grad_(grad_enabled), hooks_(hooks) {
    const FamilyConfig& c = model.config;
    if (tokens.batch < 1 || tokens.seq < 1 || static_cast<Index>(tokens.ids.size()) != tokens.batch * tokens.seq) {
      throw input_error("token batch shape");
    }
    if (tokens.seq > c.ctx_len) {
      throw input_error("sequence length " + std::to_string(tokens.seq) + " exceeds context " + std::to_string(c.ctx_len));
    }
    positions_.resize(tokens.ids.size());
    for (Index r = 0; r < static_cast<Index>(positions_.size()); ++r) positions_[static_cast<std::size_t>(r)] = r % tokens.seq;
  }

  Var<Scalar> embed() { return embedding<Scalar>(param(model_.embedding, "embedding"), tokens_.ids); }

  Var<Scalar> block(Var<Scalar> h, const BlockWeights<Scalar>& w, const std::string& prefix) {
    const FamilyConfig& c = model_.config;
    const AttentionShape shape{c.q_heads, c.kv_heads, c.head_dim()};
    Var<Scalar> x = rmsnorm<Scalar>(h, param(w.attn_norm, prefix + ".attn_norm"), c.rms_eps);
    Var<Scalar> q = project(x, w.wq, prefix + ".wq");
    Var<Scalar> k = project(x, w.wk, prefix + ".wk");
    Var<Scalar> v = project(x, w.wv, prefix + ".wv");
    q = rope<Scalar>(q, c.q_heads, c.head_dim(), positions_, c.rope_base);
    k = rope<Scalar>(k, c.kv_heads, c.head_dim(), positions_, c.rope_base);
    Var<Scalar> att = causal_attention<Scalar>(q, k, v, tokens_.batch, tokens_.seq, shape);
    Var<Scalar> h1 = add<Scalar>(h, project(att, w.wo, prefix + ".wo"));
    Var<Scalar> x2 = rmsnorm<Scalar>(h1, param(w.mlp_norm, prefix + ".mlp_norm"), c.rms_eps);
    Var<Scalar> act = swiglu<Scalar>(project(x2, w.w_gate, prefix + ".w_gate"), project(x2, w.w_up, prefix + ".w_up"));
    Var<Scalar> out = add<Scalar>(h1, project(act, w.w_down, prefix + ".w_down"));
    if (hooks_ && hooks_->block) hooks_->block(prefix, h.value(), out.value());
    return out;
  }

  /// Exit head `exit` applied to the residual stream tapped at its depth.
  Var<Scalar> head(Var<Scalar> h, int exit) {
    const ExitHead<Scalar>& e = model_.exits[static_cast<std::size_t>(exit)];
    const std::string p = "exits." + std::to_string(exit);
    for (std::size_t j = 0; j < e.blocks.size(); ++j) h = block(h, e.blocks[j], p + ".blocks." + std::to_string(j));
    for (std::size_t j = 0; j < e.expansion.size(); ++j) h = block(h, e.expansion[j], p + ".expand." + std::to_string(j));
    Var<Scalar> n = rmsnorm<Scalar>(h, param(e.final_norm, p + ".final_norm"), model_.config.rms_eps);
    return project(n, e.lm_proj, p + ".lm_proj");
  }

  /// Logits of every exit from a single pass over the backbone.
  std::vector<Var<Scalar>> all_branches() {
    const FamilyConfig& c = model_.config;
    std::vector<Var<Scalar>> logits;
    Var<Scalar> h = embed();
    int layer = 0;
    for (int k = 0; k < c.exits(); ++k) {
      for (; layer < c.exit_depths[static_cast<std::size_t>(k)]; ++layer) {
        h = block(h, model_.backbone[static_cast<std::size_t>(layer)], "backbone." + std::to_string(layer));
      }
      logits.push_back(head(h, k));
    }
    return logits;
  }

  Var<Scalar> branch(int exit) {
    const FamilyConfig& c = model_.config;
    if (exit < 0 || exit >= c.exits()) throw config_error("branch " + std::to_string(exit) + " out of range");
    Var<Scalar> h = embed();
    for (int layer = 0; layer < c.exit_depths[static_cast<std::size_t>(exit)]; ++layer) {
      h = block(h, model_.backbone[static_cast<std::size_t>(layer)], "backbone." + std::to_string(layer));
    }
    return head(h, exit);
  }

 private:
  Var<Scalar> param(const Matrix<Scalar>& m, const std::string& name) {
    return tape_.parameter(m, grad_ && model_.trainable(name));
  }

  Var<Scalar> project(Var<Scalar> x, const Linear<Scalar>& w, const std::string& name) {
    if (hooks_ && hooks_->linear_input) hooks_->linear_input(name, x.value());
    if (w.factored()) {
      Var<Scalar> low = linear<Scalar>(x, param(w.b, name + ".B"));
      return linear<Scalar>(low, param(w.a, name + ".A"));
    }
    return linear<Scalar>(x, param(w.weight, name));
  }

  Tape<Scalar>& tape_;
  const FamilialModel<Scalar>& model_;
  const TokenBatch& tokens_;
  bool grad_;
  const ForwardHooks<Scalar>* hooks_;
  std::vector<Index> positions_;
};

/// Logits (batch*seq x vocab) of one exit, without gradient tracking.
template <typename Scalar>
Matrix<Scalar> forward_branch(const FamilialModel<Scalar>& model, const TokenBatch& tokens, int branch,
                              const ForwardHooks<Scalar>* hooks = nullptr) {
  Tape<Scalar> tape;
  Forward<Scalar> f(tape, model, tokens, false, hooks);
  return f.branch(branch).value();
}

/// Logits of all exits from one backbone pass, without gradient tracking.
template <typename Scalar>
std::vector<Matrix<Scalar>> forward_all_branches(const FamilialModel<Scalar>& model, const TokenBatch& tokens,
                                                 const ForwardHooks<Scalar>* hooks = nullptr) {
  Tape<Scalar> tape;
  Forward<Scalar> f(tape, model, tokens, false, hooks);
  std::vector<Matrix<Scalar>> out;
  for (auto v : f.all_branches()) out.push_back(v.value());
  return out;
}

}  // namespace familykit

#endif  // FAMILYKIT_FORWARD_HPP
