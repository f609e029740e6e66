// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_MODEL_HPP
#define FAMILYKIT_MODEL_HPP

// Parameter containers for the shared-backbone, multi-exit decoder.
//
// Parameter names:
//   embedding
//   backbone.{i}.{attn_norm,wq,wk,wv,wo,mlp_norm,w_gate,w_up,w_down}
//   exits.{k}.blocks.{j}.{...}      branch-specific blocks
//   exits.{k}.expand.{j}.{...}      blocks added by expansion
//   exits.{k}.final_norm
//   exits.{k}.lm_proj
// A low-rank linear is stored as {name}.A (out x r) and {name}.B (r x in).

#include <array>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "familykit/config.hpp"
#include "familykit/error.hpp"
#include "familykit/rng.hpp"
#include "familykit/tensor.hpp"

namespace familykit {

template <typename Scalar>
struct Linear {
  Matrix<Scalar> weight;  // out x in; empty when factored
  Matrix<Scalar> a;       // out x rank
  Matrix<Scalar> b;       // rank x in

  bool factored() const { return a.size() != 0; }
  Index out_features() const { return factored() ? a.rows() : weight.rows(); }
  Index in_features() const { return factored() ? b.cols() : weight.cols(); }
  Index parameters() const { return factored() ? a.size() + b.size() : weight.size(); }
  Matrix<Scalar> dense() const { return factored() ? Matrix<Scalar>(a * b) : weight; }

  template <typename To>
  Linear<To> cast() const {
    return {weight.template cast<To>(), a.template cast<To>(), b.template cast<To>()};
  }
};

inline constexpr std::array<std::string_view, 7> kBlockMatrices{"wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"};

template <typename Scalar>
struct BlockWeights {
  Matrix<Scalar> attn_norm;  // 1 x hidden
  Linear<Scalar> wq, wk, wv, wo;
  Matrix<Scalar> mlp_norm;  // 1 x hidden
  Linear<Scalar> w_gate, w_up, w_down;

  Linear<Scalar>& matrix(std::string_view name) { return const_cast<Linear<Scalar>&>(std::as_const(*this).matrix(name)); }
  const Linear<Scalar>& matrix(std::string_view name) const {
    if (name == "wq") return wq;
    if (name == "wk") return wk;
    if (name == "wv") return wv;
    if (name == "wo") return wo;
    if (name == "w_gate") return w_gate;
    if (name == "w_up") return w_up;
    if (name == "w_down") return w_down;
    throw config_error("unknown block matrix '" + std::string(name) + "'");
  }

  template <typename Fn>
  void for_each_linear(Fn&& fn) {
    for (auto name : kBlockMatrices) fn(name, matrix(name));
  }

  template <typename To>
  BlockWeights<To> cast() const {
    return {attn_norm.template cast<To>(), wq.template cast<To>(), wk.template cast<To>(), wv.template cast<To>(),
            wo.template cast<To>(), mlp_norm.template cast<To>(), w_gate.template cast<To>(),
            w_up.template cast<To>(), w_down.template cast<To>()};
  }
};

template <typename Scalar>
struct ExitHead {
  std::vector<BlockWeights<Scalar>> blocks;
  std::vector<BlockWeights<Scalar>> expansion;
  Matrix<Scalar> final_norm;  // 1 x hidden
  Linear<Scalar> lm_proj;     // vocab x hidden, untied from the embedding
};

template <typename Scalar>
struct FamilialModel {
  FamilyConfig config;
  std::uint64_t seed = 0;
  Matrix<Scalar> embedding;  // vocab x hidden
  std::vector<BlockWeights<Scalar>> backbone;
  std::vector<ExitHead<Scalar>> exits;
  /// Freeze mask, stored as the set of frozen parameter names.
  std::set<std::string> frozen;

  bool trainable(const std::string& name) const { return !frozen.contains(name); }

  /// Visits every parameter matrix in canonical order as fn(name, matrix).
  template <typename Fn>
  void for_each_parameter(Fn&& fn) const {
    const_cast<FamilialModel*>(this)->visit(
        [&](const std::string& name, Matrix<Scalar>& m) { fn(name, static_cast<const Matrix<Scalar>&>(m)); });
  }
  template <typename Fn>
  void for_each_parameter(Fn&& fn) {
    visit(fn);
  }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for_each_parameter([&](const std::string& n, const Matrix<Scalar>&) { names.push_back(n); });
    return names;
  }

  Matrix<Scalar>* find_parameter(const std::string& name) {
    Matrix<Scalar>* found = nullptr;
    visit([&](const std::string& n, Matrix<Scalar>& m) {
      if (n == name) found = &m;
    });
    return found;
  }

  template <typename To>
  FamilialModel<To> cast() const {
    FamilialModel<To> out;
    out.config = config;
    out.seed = seed;
    out.frozen = frozen;
    out.embedding = embedding.template cast<To>();
    for (const auto& b : backbone) out.backbone.push_back(b.template cast<To>());
    for (const auto& e : exits) {
      ExitHead<To> h;
      for (const auto& b : e.blocks) h.blocks.push_back(b.template cast<To>());
      for (const auto& b : e.expansion) h.expansion.push_back(b.template cast<To>());
      h.final_norm = e.final_norm.template cast<To>();
      h.lm_proj = e.lm_proj.template cast<To>();
      out.exits.push_back(std::move(h));
    }
    return out;
  }

 private:
  template <typename Fn>
  static void visit_linear(const std::string& name, Linear<Scalar>& l, Fn& fn) {
    if (l.factored()) {
      fn(name + ".A", l.a);
      fn(name + ".B", l.b);
    } else {
      fn(name, l.weight);
    }
  }

  template <typename Fn>
  static void visit_block(const std::string& prefix, BlockWeights<Scalar>& b, Fn& fn) {
    fn(prefix + ".attn_norm", b.attn_norm);
    visit_linear(prefix + ".wq", b.wq, fn);
    visit_linear(prefix + ".wk", b.wk, fn);
    visit_linear(prefix + ".wv", b.wv, fn);
    visit_linear(prefix + ".wo", b.wo, fn);
    fn(prefix + ".mlp_norm", b.mlp_norm);
    visit_linear(prefix + ".w_gate", b.w_gate, fn);
    visit_linear(prefix + ".w_up", b.w_up, fn);
    visit_linear(prefix + ".w_down", b.w_down, fn);
  }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn(std::string("embedding"), embedding);
    for (std::size_t i = 0; i < backbone.size(); ++i) visit_block("backbone." + std::to_string(i), backbone[i], fn);
    for (std::size_t k = 0; k < exits.size(); ++k) {
      const std::string p = "exits." + std::to_string(k);
      for (std::size_t j = 0; j < exits[k].blocks.size(); ++j) {
        visit_block(p + ".blocks." + std::to_string(j), exits[k].blocks[j], fn);
      }
      for (std::size_t j = 0; j < exits[k].expansion.size(); ++j) {
        visit_block(p + ".expand." + std::to_string(j), exits[k].expansion[j], fn);
      }
      fn(p + ".final_norm", exits[k].final_norm);
      visit_linear(p + ".lm_proj", exits[k].lm_proj, fn);
    }
  }
};

// ---------------------------------------------------------------------------

template <typename Scalar>
Matrix<Scalar> gaussian_matrix(CounterRng rng, Index rows, Index cols, double stddev) {
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(rng.gaussian() * stddev);
  return m;
}

/// Fresh block with Gaussian projections and unit gains. Each matrix draws from
/// the stream named `{prefix}.{matrix}`.
template <typename Scalar>
BlockWeights<Scalar> init_block(const FamilyConfig& c, const CounterRng& rng, const std::string& prefix,
                                double stddev = 0.02) {
  auto g = [&](std::string_view name, Index rows, Index cols) {
    return Linear<Scalar>{gaussian_matrix<Scalar>(rng.split(prefix + "." + std::string(name)), rows, cols, stddev), {}, {}};
  };
  BlockWeights<Scalar> b;
  b.attn_norm = Matrix<Scalar>::Ones(1, c.hidden);
  b.wq = g("wq", c.hidden, c.hidden);
  b.wk = g("wk", c.kv_dim(), c.hidden);
  b.wv = g("wv", c.kv_dim(), c.hidden);
  b.wo = g("wo", c.hidden, c.hidden);
  b.mlp_norm = Matrix<Scalar>::Ones(1, c.hidden);
  b.w_gate = g("w_gate", c.mlp_hidden(), c.hidden);
  b.w_up = g("w_up", c.mlp_hidden(), c.hidden);
  b.w_down = g("w_down", c.hidden, c.mlp_hidden());
  return b;
}

/// Gaussian(0, 0.02^2) projections, unit RMS gains. Branch block j of exit k
/// starts as a copy of backbone layer exit_depths[k] + j when that layer exists.
template <typename Scalar>
FamilialModel<Scalar> init_model(const FamilyConfig& config, std::uint64_t seed) {
  config.validate();
  const CounterRng root(seed);
  FamilialModel<Scalar> m;
  m.config = config;
  m.seed = seed;
  m.embedding = gaussian_matrix<Scalar>(root.split("embedding"), config.vocab, config.hidden, 0.02);
  for (int i = 0; i < config.n_layers; ++i) {
    m.backbone.push_back(init_block<Scalar>(config, root, "backbone." + std::to_string(i)));
  }
  for (int k = 0; k < config.exits(); ++k) {
    const std::string p = "exits." + std::to_string(k);
    ExitHead<Scalar> head;
    for (int j = 0; j < config.branch_blocks; ++j) {
      const int source = config.exit_depths[static_cast<std::size_t>(k)] + j;
      if (source < config.n_layers) {
        head.blocks.push_back(m.backbone[static_cast<std::size_t>(source)]);
      } else {
        head.blocks.push_back(init_block<Scalar>(config, root, p + ".blocks." + std::to_string(j)));
      }
    }
    for (int j = 0; j < config.expanded(k); ++j) {
      head.expansion.push_back(init_block<Scalar>(config, root, p + ".expand." + std::to_string(j)));
    }
    head.final_norm = Matrix<Scalar>::Ones(1, config.hidden);
    head.lm_proj = {gaussian_matrix<Scalar>(root.split(p + ".lm_proj"), config.vocab, config.hidden, 0.02), {}, {}};
    m.exits.push_back(std::move(head));
  }
  return m;
}

/// The linear layer named `name` (dense name, without .A/.B), or null.
template <typename Scalar>
Linear<Scalar>* find_linear(FamilialModel<Scalar>& m, const std::string& name) {
  auto split = [](const std::string& s) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
      if (i == s.size() || s[i] == '.') {
        parts.push_back(s.substr(start, i - start));
        start = i + 1;
      }
    }
    return parts;
  };
  auto index = [](const std::string& s, std::size_t bound) -> long {
    if (s.empty() || s.size() > 9 || s.find_first_not_of("0123456789") != std::string::npos) return -1;
    const long v = std::stol(s);
    return v < static_cast<long>(bound) ? v : -1;
  };
  auto in_block = [](BlockWeights<Scalar>& b, const std::string& matrix) -> Linear<Scalar>* {
    for (auto n : kBlockMatrices) {
      if (n == matrix) return &b.matrix(n);
    }
    return nullptr;
  };
  const auto p = split(name);
  if (p.size() == 3 && p[0] == "backbone") {
    const long i = index(p[1], m.backbone.size());
    return i < 0 ? nullptr : in_block(m.backbone[static_cast<std::size_t>(i)], p[2]);
  }
  if (p.size() < 3 || p[0] != "exits") return nullptr;
  const long k = index(p[1], m.exits.size());
  if (k < 0) return nullptr;
  ExitHead<Scalar>& e = m.exits[static_cast<std::size_t>(k)];
  if (p.size() == 3) return p[2] == "lm_proj" ? &e.lm_proj : nullptr;
  if (p.size() != 5) return nullptr;
  auto& list = p[2] == "blocks" ? e.blocks : e.expansion;
  if (p[2] != "blocks" && p[2] != "expand") return nullptr;
  const long j = index(p[3], list.size());
  return j < 0 ? nullptr : in_block(list[static_cast<std::size_t>(j)], p[4]);
}

struct ParamCount {
  Index embedding = 0;
  Index backbone = 0;
  std::vector<Index> exits;
  Index total = 0;
};

template <typename Scalar>
Index block_parameters(const BlockWeights<Scalar>& b) {
  Index n = b.attn_norm.size() + b.mlp_norm.size();
  for (auto name : kBlockMatrices) n += b.matrix(name).parameters();
  return n;
}

template <typename Scalar>
ParamCount param_count(const FamilialModel<Scalar>& m) {
  ParamCount c;
  c.embedding = m.embedding.size();
  for (const auto& b : m.backbone) c.backbone += block_parameters(b);
  for (const auto& e : m.exits) {
    Index n = e.final_norm.size() + e.lm_proj.parameters();
    for (const auto& b : e.blocks) n += block_parameters(b);
    for (const auto& b : e.expansion) n += block_parameters(b);
    c.exits.push_back(n);
  }
  c.total = c.embedding + c.backbone;
  for (Index n : c.exits) c.total += n;
  return c;
}

/// Standalone single-exit model made of backbone layers [0, exit_depths[branch])
/// and a copy of that exit head. Its forward matches the family's branch output.
template <typename Scalar>
FamilialModel<Scalar> extract_submodel(const FamilialModel<Scalar>& m, int branch) {
  if (branch < 0 || branch >= m.config.exits()) throw config_error("branch " + std::to_string(branch) + " out of range");
  const int depth = m.config.exit_depths[static_cast<std::size_t>(branch)];
  FamilialModel<Scalar> out;
  out.config = m.config;
  out.config.n_layers = depth;
  out.config.exit_depths = {depth};
  out.config.expanded_blocks = m.config.expanded_blocks.empty()
                                   ? std::vector<int>{}
                                   : std::vector<int>{m.config.expanded(branch)};
  out.seed = m.seed;
  out.embedding = m.embedding;
  out.backbone.assign(m.backbone.begin(), m.backbone.begin() + depth);
  out.exits = {m.exits[static_cast<std::size_t>(branch)]};
  const std::string from = "exits." + std::to_string(branch) + ".";
  for (const auto& name : m.frozen) {
    if (name.starts_with("exits.")) {
      if (name.starts_with(from)) out.frozen.insert("exits.0." + name.substr(from.size()));
    } else if (name.starts_with("backbone.")) {
      const int layer = std::stoi(name.substr(9));
      if (layer < depth) out.frozen.insert(name);
    } else {
      out.frozen.insert(name);
    }
  }
  return out;
}

}  // namespace familykit

#endif  // FAMILYKIT_MODEL_HPP
