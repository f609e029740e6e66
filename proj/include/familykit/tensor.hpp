// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_TENSOR_HPP
#define FAMILYKIT_TENSOR_HPP

// Dense row-major matrices and the forward kernels shared by the autograd tape
// and the incremental decoder. Rank-3 activations ([batch, time, feature]) are
// stored flattened as (batch * time) x feature.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "familykit/error.hpp"

namespace familykit {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

using TokenId = std::int32_t;

inline std::string shape_string(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

/// c = a * b with shape checking.
template <typename Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw dimension_error("matmul " + shape_string(a.rows(), a.cols()) + " x " +
                          shape_string(b.rows(), b.cols()));
  }
  return a * b;
}

/// Numerically stable softmax along `axis` (1 = across each row, 0 = down each column).
template <typename Scalar>
Matrix<Scalar> softmax(const Matrix<Scalar>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw dimension_error("softmax axis must be 0 or 1");
  if (!x.allFinite()) throw input_error("softmax of non-finite input");
  if (axis == 0) {
    Matrix<Scalar> t = x.transpose();
    return softmax<Scalar>(t, 1).transpose();
  }
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar peak = x.row(r).maxCoeff();
    double total = 0.0;
    for (Index c = 0; c < x.cols(); ++c) {
      const double e = std::exp(static_cast<double>(x(r, c) - peak));
      y(r, c) = static_cast<Scalar>(e);
      total += e;
    }
    const double inv = 1.0 / total;
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = static_cast<Scalar>(static_cast<double>(y(r, c)) * inv);
  }
  return y;
}

/// y = x / sqrt(mean(x^2) + eps) * gamma, applied per row. Also returns the
/// per-row reciprocal RMS for the backward pass when `inv_rms` is non-null.
template <typename Scalar>
Matrix<Scalar> rmsnorm(const Matrix<Scalar>& x, const RowVector<Scalar>& gamma, double eps,
                       std::vector<double>* inv_rms = nullptr) {
  if (gamma.size() != x.cols()) {
    throw dimension_error("rmsnorm gain " + std::to_string(gamma.size()) + " vs features " +
                          std::to_string(x.cols()));
  }
  Matrix<Scalar> y(x.rows(), x.cols());
  if (inv_rms) inv_rms->resize(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) {
    double ss = 0.0;
    for (Index c = 0; c < x.cols(); ++c) ss += static_cast<double>(x(r, c)) * static_cast<double>(x(r, c));
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
    if (inv_rms) (*inv_rms)[static_cast<std::size_t>(r)] = inv;
    for (Index c = 0; c < x.cols(); ++c) {
      y(r, c) = static_cast<Scalar>(static_cast<double>(x(r, c)) * inv) * gamma(c);
    }
  }
  return y;
}

/// Rotary position embedding on a (rows x heads*head_dim) matrix, half-split
/// pairing (i, i + head_dim/2). `positions[r]` is the absolute position of row r.
/// `inverse` applies the transpose rotation (used by the backward pass).
template <typename Scalar>
void apply_rope(Matrix<Scalar>& x, Index heads, Index head_dim, std::span<const Index> positions,
                double base, bool inverse = false) {
  const Index half = head_dim / 2;
  for (Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(r)]);
    for (Index i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      const double angle = pos * freq;
      const double cs = std::cos(angle);
      const double sn = inverse ? -std::sin(angle) : std::sin(angle);
      for (Index h = 0; h < heads; ++h) {
        const Index a = h * head_dim + i;
        const Index b = a + half;
        const double x0 = static_cast<double>(x(r, a));
        const double x1 = static_cast<double>(x(r, b));
        x(r, a) = static_cast<Scalar>(x0 * cs - x1 * sn);
        x(r, b) = static_cast<Scalar>(x0 * sn + x1 * cs);
      }
    }
  }
}

/// Geometry of grouped-query attention.
struct AttentionShape {
  Index q_heads = 1;
  Index kv_heads = 1;
  Index head_dim = 1;
  Index group() const { return q_heads / kv_heads; }
};

/// Attention for a single query against `len` keys/values. `keys`/`values`
/// point at row 0 of a row-major cache with row stride `stride`. Writes the
/// head output to `out` and the attention probabilities to `probs` (length len).
/// Both the batched forward and the incremental decoder route through this, so
/// the two agree bit-for-bit on the attention step.
template <typename Scalar>
void attend_one(const Scalar* query, const Scalar* keys, const Scalar* values, Index stride, Index len,
                Index head_dim, Scalar* out, Scalar* probs) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  double peak = -std::numeric_limits<double>::infinity();
  for (Index s = 0; s < len; ++s) {
    double dot = 0.0;
    const Scalar* k = keys + s * stride;
    for (Index d = 0; d < head_dim; ++d) dot += static_cast<double>(query[d]) * static_cast<double>(k[d]);
    probs[s] = static_cast<Scalar>(dot * scale);
    peak = std::max(peak, static_cast<double>(probs[s]));
  }
  double total = 0.0;
  for (Index s = 0; s < len; ++s) {
    const double e = std::exp(static_cast<double>(probs[s]) - peak);
    probs[s] = static_cast<Scalar>(e);
    total += e;
  }
  const double inv = 1.0 / total;
  for (Index s = 0; s < len; ++s) probs[s] = static_cast<Scalar>(static_cast<double>(probs[s]) * inv);
  for (Index d = 0; d < head_dim; ++d) {
    double acc = 0.0;
    for (Index s = 0; s < len; ++s) acc += static_cast<double>(probs[s]) * static_cast<double>(values[s * stride + d]);
    out[d] = static_cast<Scalar>(acc);
  }
}

/// Causal grouped-query attention over `batch` sequences of length `seq` stored
/// as (batch*seq) rows. q: rows x q_heads*head_dim; k, v: rows x kv_heads*head_dim.
/// When `probs` is non-null it receives one (seq x seq) lower-triangular block per
/// (batch, q_head), laid out as rows [(b*q_heads + h)*seq, ...).
template <typename Scalar>
Matrix<Scalar> causal_attention(const Matrix<Scalar>& q, const Matrix<Scalar>& k, const Matrix<Scalar>& v,
                                Index batch, Index seq, const AttentionShape& shape,
                                Matrix<Scalar>* probs = nullptr) {
  const Index hd = shape.head_dim;
  if (q.rows() != batch * seq || k.rows() != q.rows() || v.rows() != q.rows() ||
      q.cols() != shape.q_heads * hd || k.cols() != shape.kv_heads * hd || v.cols() != k.cols()) {
    throw dimension_error("causal_attention operand shapes");
  }
  Matrix<Scalar> out(q.rows(), q.cols());
  if (probs) probs->setZero(batch * shape.q_heads * seq, seq);
  std::vector<Scalar> scratch(static_cast<std::size_t>(seq));
  const Index group = shape.group();
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < shape.q_heads; ++h) {
      const Index g = h / group;
      for (Index t = 0; t < seq; ++t) {
        const Index row = b * seq + t;
        attend_one<Scalar>(q.data() + row * q.cols() + h * hd, k.data() + (b * seq) * k.cols() + g * hd,
                           v.data() + (b * seq) * v.cols() + g * hd, k.cols(), t + 1, hd,
                           out.data() + row * out.cols() + h * hd, scratch.data());
        if (probs) {
          for (Index s = 0; s <= t; ++s) (*probs)((b * shape.q_heads + h) * seq + t, s) = scratch[static_cast<std::size_t>(s)];
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Scalar silu(Scalar x) {
  return static_cast<Scalar>(static_cast<double>(x) / (1.0 + std::exp(-static_cast<double>(x))));
}

/// Gated MLP activation: silu(gate) * up.
template <typename Scalar>
Matrix<Scalar> swiglu(const Matrix<Scalar>& gate, const Matrix<Scalar>& up) {
  if (gate.rows() != up.rows() || gate.cols() != up.cols()) throw dimension_error("swiglu operand shapes");
  Matrix<Scalar> y(gate.rows(), gate.cols());
  for (Index i = 0; i < gate.size(); ++i) y.data()[i] = silu(gate.data()[i]) * up.data()[i];
  return y;
}

/// x * w^T, i.e. a linear layer with weight stored (out x in).
///
/// Each output element is a left-to-right binary64 dot product, so a row's
/// result does not depend on how many other rows share the call.
template <typename Scalar>
Matrix<Scalar> linear(const Matrix<Scalar>& x, const Matrix<Scalar>& w) {
  if (x.cols() != w.cols()) {
    throw dimension_error("linear input " + shape_string(x.rows(), x.cols()) + " vs weight " +
                          shape_string(w.rows(), w.cols()));
  }
  const Index n = x.cols();
  const Index outs = w.rows();
  Matrix<Scalar> y(x.rows(), outs);
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar* xi = x.data() + i * n;
    Scalar* yi = y.data() + i * outs;
    Index o = 0;
    for (; o + 4 <= outs; o += 4) {
      const Scalar* w0 = w.data() + o * n;
      const Scalar* w1 = w0 + n;
      const Scalar* w2 = w1 + n;
      const Scalar* w3 = w2 + n;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (Index k = 0; k < n; ++k) {
        const double v = static_cast<double>(xi[k]);
        s0 += v * static_cast<double>(w0[k]);
        s1 += v * static_cast<double>(w1[k]);
        s2 += v * static_cast<double>(w2[k]);
        s3 += v * static_cast<double>(w3[k]);
      }
      yi[o] = static_cast<Scalar>(s0);
      yi[o + 1] = static_cast<Scalar>(s1);
      yi[o + 2] = static_cast<Scalar>(s2);
      yi[o + 3] = static_cast<Scalar>(s3);
    }
    for (; o < outs; ++o) {
      const Scalar* wo = w.data() + o * n;
      double s = 0.0;
      for (Index k = 0; k < n; ++k) s += static_cast<double>(xi[k]) * static_cast<double>(wo[k]);
      yi[o] = static_cast<Scalar>(s);
    }
  }
  return y;
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits),
/// skipping positions equal to `ignore_index`. Accumulated in binary64.
/// Returns the number of counted positions through `counted`.
template <typename Scalar>
double cross_entropy_value(const Matrix<Scalar>& logits, std::span<const TokenId> targets, TokenId ignore_index,
                           Index* counted = nullptr) {
  if (static_cast<Index>(targets.size()) != logits.rows()) throw dimension_error("cross_entropy targets length");
  double total = 0.0;
  Index n = 0;
  for (Index r = 0; r < logits.rows(); ++r) {
    const TokenId t = targets[static_cast<std::size_t>(r)];
    if (t == ignore_index) continue;
    if (t < 0 || t >= logits.cols()) throw input_error("cross_entropy target out of range: " + std::to_string(t));
    const double peak = static_cast<double>(logits.row(r).maxCoeff());
    double sum = 0.0;
    for (Index c = 0; c < logits.cols(); ++c) sum += std::exp(static_cast<double>(logits(r, c)) - peak);
    total += peak + std::log(sum) - static_cast<double>(logits(r, t));
    ++n;
  }
  if (n == 0) throw data_error("cross_entropy over an empty set of positions");
  if (counted) *counted = n;
  return total / static_cast<double>(n);
}

}  // namespace familykit

#endif  // FAMILYKIT_TENSOR_HPP
