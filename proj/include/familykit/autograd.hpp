// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_AUTOGRAD_HPP
#define FAMILYKIT_AUTOGRAD_HPP

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape records nodes in creation order, which is already a topological
// order: every node's parents were created before it. backward() walks the
// tape once from the loss down to the first node.

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "familykit/error.hpp"
#include "familykit/tensor.hpp"

namespace familykit {

template <typename Scalar>
class Tape;

template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, const Mat& grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Mat value) { return push(std::move(value), false, nullptr); }

  Var<Scalar> leaf(Mat value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

  /// Leaf bound to a parameter matrix living outside the tape. Repeated calls
  /// with the same matrix return the same node, so shared weights accumulate
  /// a single gradient.
  Var<Scalar> parameter(const Mat& p, bool trainable) {
    if (auto it = params_.find(&p); it != params_.end()) return {this, it->second};
    Var<Scalar> v = push(p, trainable, nullptr);
    params_.emplace(&p, v.id);
    return v;
  }

  /// Gradient of the last backward() with respect to a bound parameter, or
  /// nullptr when the parameter was not reached (or is not trainable).
  const Mat* parameter_grad(const Mat& p) const {
    auto it = params_.find(&p);
    if (it == params_.end()) return nullptr;
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (!n.requires_grad || n.grad.size() == 0) return nullptr;
    return &n.grad;
  }

  const Mat& value(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  /// Binary64 value of a scalar-producing node (falls back to the stored value).
  double scalar(Var<Scalar> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!std::isnan(n.scalar64)) return n.scalar64;
    if (n.value.size() != 1) throw graph_error("scalar() on a non-scalar node");
    return static_cast<double>(n.value(0, 0));
  }

  const Mat* grad(Var<Scalar> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.grad.size() ? &n.grad : nullptr;
  }

  bool requires_grad(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var<Scalar> loss) {
    if (loss.tape != this) throw graph_error("loss belongs to a different tape");
    Node& root = nodes_[static_cast<std::size_t>(loss.id)];
    if (root.value.size() != 1) throw graph_error("backward needs a scalar loss");
    if (!root.requires_grad) throw graph_error("loss is detached from every trainable parameter");
    root.grad = Mat::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
      // The closure may append to nothing and only touches parents (< id),
      // so the reference stays valid.
      n.backward(*this, n.grad);
    }
  }

  /// Adds `delta` to the gradient of `v` if it participates in differentiation.
  template <typename Derived>
  void accumulate(Var<Scalar> v, const Eigen::MatrixBase<Derived>& delta) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = delta;
    } else {
      n.grad += delta;
    }
  }

  /// Mutable gradient buffer (zero-initialised on first use). Used by ops whose
  /// backward scatters into a parent.
  Mat& grad_buffer(Var<Scalar> v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var<Scalar> push(Mat value, bool requires_grad, BackwardFn fn, double scalar64 = kNoScalar) {
    nodes_.push_back(Node{std::move(value), Mat{}, requires_grad, requires_grad ? std::move(fn) : BackwardFn{},
                          scalar64});
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

 private:
  static constexpr double kNoScalar = std::numeric_limits<double>::quiet_NaN();

  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
    double scalar64 = kNoScalar;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> params_;
};

// ---------------------------------------------------------------------------
// Differentiable operations.

template <typename Scalar>
bool any_requires_grad(std::initializer_list<Var<Scalar>> vars) {
  for (const auto& v : vars) {
    if (v.tape->requires_grad(v)) return true;
  }
  return false;
}

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  return t.push(matmul<Scalar>(a.value(), b.value()), any_requires_grad({a, b}),
                [a, b](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  if (tape.requires_grad(a)) tape.accumulate(a, g * b.value().transpose());
                  if (tape.requires_grad(b)) tape.accumulate(b, a.value().transpose() * g);
                });
}

/// x * w^T with w stored (out x in).
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> w) {
  Tape<Scalar>& t = *x.tape;
  return t.push(linear<Scalar>(x.value(), w.value()), any_requires_grad({x, w}),
                [x, w](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  if (tape.requires_grad(x)) tape.accumulate(x, g * w.value());
                  if (tape.requires_grad(w)) tape.accumulate(w, g.transpose() * x.value());
                });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw dimension_error("add operand shapes");
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() + b.value(), any_requires_grad({a, b}),
                [a, b](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  tape.accumulate(a, g);
                  tape.accumulate(b, g);
                });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw dimension_error("mul operand shapes");
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value().cwiseProduct(b.value()), any_requires_grad({a, b}),
                [a, b](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  if (tape.requires_grad(a)) tape.accumulate(a, g.cwiseProduct(b.value()));
                  if (tape.requires_grad(b)) tape.accumulate(b, g.cwiseProduct(a.value()));
                });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, double s) {
  Tape<Scalar>& t = *a.tape;
  return t.push(a.value() * static_cast<Scalar>(s), any_requires_grad({a}),
                [a, s](Tape<Scalar>& tape, const Matrix<Scalar>& g) { tape.accumulate(a, g * static_cast<Scalar>(s)); });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  double total = 0.0;
  for (Index i = 0; i < a.value().size(); ++i) total += static_cast<double>(a.value().data()[i]);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total);
  return t.push(std::move(out), any_requires_grad({a}),
                [a](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  tape.accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), g(0, 0)));
                },
                total);
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x, int axis = 1) {
  Tape<Scalar>& t = *x.tape;
  Matrix<Scalar> y = softmax<Scalar>(x.value(), axis);
  const int id = static_cast<int>(t.size());
  return t.push(std::move(y), any_requires_grad({x}),
                [x, id, axis](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  const Matrix<Scalar>& y = tape.value(Var<Scalar>{&tape, id});
                  Matrix<Scalar> gy = g.cwiseProduct(y);
                  Matrix<Scalar> dx(y.rows(), y.cols());
                  if (axis == 1) {
                    for (Index r = 0; r < y.rows(); ++r) dx.row(r) = gy.row(r) - y.row(r) * gy.row(r).sum();
                  } else {
                    for (Index c = 0; c < y.cols(); ++c) dx.col(c) = gy.col(c) - y.col(c) * gy.col(c).sum();
                  }
                  tape.accumulate(x, dx);
                });
}

/// Row-wise RMS normalisation with a learned gain (1 x features).
template <typename Scalar>
Var<Scalar> rmsnorm(Var<Scalar> x, Var<Scalar> gamma, double eps) {
  Tape<Scalar>& t = *x.tape;
  std::vector<double> inv;
  const RowVector<Scalar> gain = gamma.value().row(0);
  Matrix<Scalar> y = rmsnorm<Scalar>(x.value(), gain, eps, &inv);
  return t.push(std::move(y), any_requires_grad({x, gamma}),
                [x, gamma, inv = std::move(inv)](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  const Matrix<Scalar>& xv = x.value();
                  const Matrix<Scalar>& gv = gamma.value();
                  const Index d = xv.cols();
                  if (tape.requires_grad(gamma)) {
                    Matrix<Scalar> dg = Matrix<Scalar>::Zero(1, d);
                    for (Index r = 0; r < xv.rows(); ++r) {
                      const double ir = inv[static_cast<std::size_t>(r)];
                      for (Index c = 0; c < d; ++c) {
                        dg(0, c) += static_cast<Scalar>(static_cast<double>(g(r, c)) * static_cast<double>(xv(r, c)) * ir);
                      }
                    }
                    tape.accumulate(gamma, dg);
                  }
                  if (tape.requires_grad(x)) {
                    Matrix<Scalar> dx(xv.rows(), d);
                    for (Index r = 0; r < xv.rows(); ++r) {
                      const double ir = inv[static_cast<std::size_t>(r)];
                      double dot = 0.0;
                      for (Index c = 0; c < d; ++c) {
                        dot += static_cast<double>(g(r, c)) * static_cast<double>(gv(0, c)) * static_cast<double>(xv(r, c));
                      }
                      const double k = ir * ir * ir * dot / static_cast<double>(d);
                      for (Index c = 0; c < d; ++c) {
                        dx(r, c) = static_cast<Scalar>(ir * static_cast<double>(g(r, c)) * static_cast<double>(gv(0, c)) -
                                                       k * static_cast<double>(xv(r, c)));
                      }
                    }
                    tape.accumulate(x, dx);
                  }
                });
}

template <typename Scalar>
Var<Scalar> rope(Var<Scalar> x, Index heads, Index head_dim, std::vector<Index> positions, double base) {
  Tape<Scalar>& t = *x.tape;
  Matrix<Scalar> y = x.value();
  apply_rope<Scalar>(y, heads, head_dim, positions, base);
  return t.push(std::move(y), any_requires_grad({x}),
                [x, heads, head_dim, positions = std::move(positions), base](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  Matrix<Scalar> dx = g;
                  apply_rope<Scalar>(dx, heads, head_dim, positions, base, /*inverse=*/true);
                  tape.accumulate(x, dx);
                });
}

template <typename Scalar>
Var<Scalar> causal_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, Index batch, Index seq,
                             AttentionShape shape) {
  Tape<Scalar>& t = *q.tape;
  const bool rg = any_requires_grad({q, k, v});
  Matrix<Scalar> probs;
  Matrix<Scalar> out = causal_attention<Scalar>(q.value(), k.value(), v.value(), batch, seq, shape, rg ? &probs : nullptr);
  return t.push(std::move(out), rg,
                [q, k, v, batch, seq, shape, probs = std::move(probs)](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  const Matrix<Scalar>& qv = q.value();
                  const Matrix<Scalar>& kv = k.value();
                  const Matrix<Scalar>& vv = v.value();
                  const Index hd = shape.head_dim;
                  const Index group = shape.group();
                  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
                  Matrix<Scalar> dq = Matrix<Scalar>::Zero(qv.rows(), qv.cols());
                  Matrix<Scalar> dk = Matrix<Scalar>::Zero(kv.rows(), kv.cols());
                  Matrix<Scalar> dv = Matrix<Scalar>::Zero(vv.rows(), vv.cols());
                  std::vector<double> dscore(static_cast<std::size_t>(seq));
                  for (Index b = 0; b < batch; ++b) {
                    for (Index h = 0; h < shape.q_heads; ++h) {
                      const Index gi = h / group;
                      for (Index ti = 0; ti < seq; ++ti) {
                        const Index row = b * seq + ti;
                        const Index prow = (b * shape.q_heads + h) * seq + ti;
                        double weighted = 0.0;
                        for (Index s = 0; s <= ti; ++s) {
                          const Index srow = b * seq + s;
                          const double p = static_cast<double>(probs(prow, s));
                          double dp = 0.0;
                          for (Index d = 0; d < hd; ++d) {
                            const double gd = static_cast<double>(g(row, h * hd + d));
                            dp += gd * static_cast<double>(vv(srow, gi * hd + d));
                            dv(srow, gi * hd + d) += static_cast<Scalar>(p * gd);
                          }
                          dscore[static_cast<std::size_t>(s)] = dp;
                          weighted += p * dp;
                        }
                        for (Index s = 0; s <= ti; ++s) {
                          const Index srow = b * seq + s;
                          const double p = static_cast<double>(probs(prow, s));
                          const double ds = p * (dscore[static_cast<std::size_t>(s)] - weighted) * scl;
                          for (Index d = 0; d < hd; ++d) {
                            dq(row, h * hd + d) += static_cast<Scalar>(ds * static_cast<double>(kv(srow, gi * hd + d)));
                            dk(srow, gi * hd + d) += static_cast<Scalar>(ds * static_cast<double>(qv(row, h * hd + d)));
                          }
                        }
                      }
                    }
                  }
                  tape.accumulate(q, dq);
                  tape.accumulate(k, dk);
                  tape.accumulate(v, dv);
                });
}

template <typename Scalar>
Var<Scalar> swiglu(Var<Scalar> gate, Var<Scalar> up) {
  Tape<Scalar>& t = *gate.tape;
  return t.push(swiglu<Scalar>(gate.value(), up.value()), any_requires_grad({gate, up}),
                [gate, up](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  const Matrix<Scalar>& a = gate.value();
                  const Matrix<Scalar>& u = up.value();
                  Matrix<Scalar> da(a.rows(), a.cols());
                  Matrix<Scalar> du(a.rows(), a.cols());
                  for (Index i = 0; i < a.size(); ++i) {
                    const double x = static_cast<double>(a.data()[i]);
                    const double sig = 1.0 / (1.0 + std::exp(-x));
                    const double gi = static_cast<double>(g.data()[i]);
                    du.data()[i] = static_cast<Scalar>(gi * x * sig);
                    da.data()[i] = static_cast<Scalar>(gi * static_cast<double>(u.data()[i]) * sig * (1.0 + x * (1.0 - sig)));
                  }
                  tape.accumulate(gate, da);
                  tape.accumulate(up, du);
                });
}

/// Row gather from an embedding table (vocab x hidden).
template <typename Scalar>
Var<Scalar> embedding(Var<Scalar> table, std::span<const TokenId> ids) {
  Tape<Scalar>& t = *table.tape;
  const Matrix<Scalar>& tv = table.value();
  Matrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      throw input_error("token id " + std::to_string(ids[i]) + " outside vocabulary of " + std::to_string(tv.rows()));
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  std::vector<TokenId> idx(ids.begin(), ids.end());
  return t.push(std::move(out), any_requires_grad({table}),
                [table, idx = std::move(idx)](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  Matrix<Scalar>& dt = tape.grad_buffer(table);
                  for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += g.row(static_cast<Index>(i));
                });
}

/// Mean token cross-entropy; the node carries the binary64 value.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::span<const TokenId> targets, TokenId ignore_index) {
  Tape<Scalar>& t = *logits.tape;
  Index counted = 0;
  const double loss = cross_entropy_value<Scalar>(logits.value(), targets, ignore_index, &counted);
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(loss);
  std::vector<TokenId> tg(targets.begin(), targets.end());
  return t.push(std::move(out), any_requires_grad({logits}),
                [logits, tg = std::move(tg), ignore_index, counted](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  const Matrix<Scalar>& z = logits.value();
                  Matrix<Scalar> dz = Matrix<Scalar>::Zero(z.rows(), z.cols());
                  const double w = static_cast<double>(g(0, 0)) / static_cast<double>(counted);
                  for (Index r = 0; r < z.rows(); ++r) {
                    const TokenId target = tg[static_cast<std::size_t>(r)];
                    if (target == ignore_index) continue;
                    const double peak = static_cast<double>(z.row(r).maxCoeff());
                    double total = 0.0;
                    for (Index c = 0; c < z.cols(); ++c) total += std::exp(static_cast<double>(z(r, c)) - peak);
                    for (Index c = 0; c < z.cols(); ++c) {
                      const double p = std::exp(static_cast<double>(z(r, c)) - peak) / total;
                      dz(r, c) = static_cast<Scalar>(w * (p - (c == target ? 1.0 : 0.0)));
                    }
                  }
                  tape.accumulate(logits, dz);
                },
                loss);
}

/// sum_k weights[k] * terms[k] over scalar nodes, accumulated in binary64.
template <typename Scalar>
Var<Scalar> weighted_sum(std::span<const Var<Scalar>> terms, std::span<const double> weights) {
  if (terms.empty() || terms.size() != weights.size()) throw config_error("weighted_sum length mismatch");
  Tape<Scalar>& t = *terms.front().tape;
  double total = 0.0;
  bool rg = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    total += weights[i] * t.scalar(terms[i]);
    rg = rg || t.requires_grad(terms[i]);
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total);
  std::vector<Var<Scalar>> tv(terms.begin(), terms.end());
  std::vector<double> wv(weights.begin(), weights.end());
  return t.push(std::move(out), rg,
                [tv = std::move(tv), wv = std::move(wv)](Tape<Scalar>& tape, const Matrix<Scalar>& g) {
                  for (std::size_t i = 0; i < tv.size(); ++i) {
                    Matrix<Scalar> d(1, 1);
                    d(0, 0) = static_cast<Scalar>(static_cast<double>(g(0, 0)) * wv[i]);
                    tape.accumulate(tv[i], d);
                  }
                },
                total);
}

}  // namespace familykit

#endif  // FAMILYKIT_AUTOGRAD_HPP
