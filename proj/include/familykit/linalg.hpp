// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_LINALG_HPP
#define FAMILYKIT_LINALG_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "familykit/error.hpp"
#include "familykit/tensor.hpp"

namespace familykit {

/// Thin SVD m = U * diag(S) * V with U (rows x p), S (p), V (p x cols), p = min(rows, cols).
/// Rows of V are the right singular vectors.
template <typename Scalar>
struct Svd {
  Matrix<Scalar> U;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> S;
  Matrix<Scalar> V;
};

struct JacobiOptions {
  int max_sweeps = 100;
  double tolerance = 1e-10;
};

namespace detail {

// Hestenes one-sided Jacobi on a tall matrix (rows >= cols). Works in place on
// `a`, accumulating the right rotations in `v` (cols x cols, columns are the
// right singular vectors).
inline void one_sided_jacobi(MatrixD& a, MatrixD& v, const JacobiOptions& opt) {
  const Index n = a.cols();
  v.setIdentity(n, n);
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    bool rotated = false;
    for (Index i = 0; i + 1 < n; ++i) {
      for (Index j = i + 1; j < n; ++j) {
        const double alpha = a.col(i).squaredNorm();
        const double beta = a.col(j).squaredNorm();
        const double gamma = a.col(i).dot(a.col(j));
        if (gamma == 0.0 || std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (Index r = 0; r < a.rows(); ++r) {
          const double ai = a(r, i);
          const double aj = a(r, j);
          a(r, i) = c * ai - s * aj;
          a(r, j) = s * ai + c * aj;
        }
        for (Index r = 0; r < n; ++r) {
          const double vi = v(r, i);
          const double vj = v(r, j);
          v(r, i) = c * vi - s * vj;
          v(r, j) = s * vi + c * vj;
        }
      }
    }
    if (!rotated) return;
  }
  throw numeric_error("Jacobi SVD did not converge in " + std::to_string(opt.max_sweeps) + " sweeps");
}

// Replace the flagged columns of `u` with unit vectors orthogonal to every other column.
inline void complete_orthonormal_columns(MatrixD& u, const std::vector<bool>& missing) {
  Index candidate = 0;
  for (Index c = 0; c < u.cols(); ++c) {
    if (!missing[static_cast<std::size_t>(c)]) continue;
    for (; candidate < u.rows(); ++candidate) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(u.rows(), candidate);
      for (int pass = 0; pass < 2; ++pass) {
        for (Index o = 0; o < u.cols(); ++o) {
          if (o == c || (missing[static_cast<std::size_t>(o)] && o > c)) continue;
          e -= u.col(o).dot(e) * u.col(o);
        }
      }
      const double norm = e.norm();
      if (norm > 1e-6) {
        u.col(c) = e / norm;
        ++candidate;
        break;
      }
    }
  }
}

}  // namespace detail

/// Singular value decomposition by one-sided Jacobi, computed in binary64.
template <typename Scalar>
Svd<Scalar> svd(const Matrix<Scalar>& m, const JacobiOptions& opt = {}) {
  if (!m.allFinite()) throw numeric_error("svd of non-finite matrix");
  if (m.size() == 0) throw dimension_error("svd of empty matrix");
  const bool wide = m.rows() < m.cols();
  MatrixD a = wide ? MatrixD(m.template cast<double>().transpose()) : MatrixD(m.template cast<double>());
  MatrixD v;
  detail::one_sided_jacobi(a, v, opt);

  const Index p = a.cols();
  std::vector<double> sigma(static_cast<std::size_t>(p));
  for (Index i = 0; i < p; ++i) sigma[static_cast<std::size_t>(i)] = a.col(i).norm();
  std::vector<Index> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) {
    return sigma[static_cast<std::size_t>(x)] > sigma[static_cast<std::size_t>(y)];
  });
  const double largest = sigma[static_cast<std::size_t>(order.front())];
  const double negligible = largest * 1e-13 * static_cast<double>(std::max(a.rows(), a.cols()));

  MatrixD u(a.rows(), p);
  MatrixD vt(p, p);
  Eigen::VectorXd s(p);
  std::vector<bool> missing(static_cast<std::size_t>(p), false);
  for (Index k = 0; k < p; ++k) {
    const Index src = order[static_cast<std::size_t>(k)];
    const double sk = sigma[static_cast<std::size_t>(src)];
    s(k) = sk;
    vt.row(k) = v.col(src).transpose();
    if (sk > negligible && sk > 0.0) {
      u.col(k) = a.col(src) / sk;
    } else {
      u.col(k).setZero();
      missing[static_cast<std::size_t>(k)] = true;
    }
  }
  detail::complete_orthonormal_columns(u, missing);

  Svd<Scalar> out;
  if (wide) {
    // m^T = u s vt  =>  m = vt^T s u^T
    out.U = vt.transpose().template cast<Scalar>();
    out.V = u.transpose().template cast<Scalar>();
  } else {
    out.U = u.template cast<Scalar>();
    out.V = vt.template cast<Scalar>();
  }
  out.S = s.template cast<Scalar>();
  return out;
}

/// Raised when a Cholesky pivot is not strictly positive.
class DefinitenessError : public Error {
 public:
  explicit DefinitenessError(const std::string& msg) : Error(ErrorKind::numeric, "definiteness error: " + msg) {}
};

/// Lower-triangular L with L * L^T == m, computed in binary64.
template <typename Scalar>
Matrix<Scalar> cholesky(const Matrix<Scalar>& m) {
  if (m.rows() != m.cols()) throw dimension_error("cholesky of non-square matrix");
  const MatrixD a = m.template cast<double>();
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-6 * scale) {
    throw input_error("cholesky of non-symmetric matrix");
  }
  const Index n = a.rows();
  MatrixD l = MatrixD::Zero(n, n);
  for (Index j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (Index k = 0; k < j; ++k) diag -= l(j, k) * l(j, k);
    if (!(diag > 0.0)) throw DefinitenessError("non-positive pivot " + std::to_string(diag) + " at " + std::to_string(j));
    const double ljj = std::sqrt(diag);
    l(j, j) = ljj;
    for (Index i = j + 1; i < n; ++i) {
      double sum = a(i, j);
      for (Index k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
      l(i, j) = sum / ljj;
    }
  }
  return l.template cast<Scalar>();
}

/// Inverse of a lower-triangular matrix by forward substitution.
template <typename Scalar>
Matrix<Scalar> lower_triangular_inverse(const Matrix<Scalar>& l) {
  if (l.rows() != l.cols()) throw dimension_error("triangular inverse of non-square matrix");
  const MatrixD ld = l.template cast<double>();
  MatrixD inv = ld.triangularView<Eigen::Lower>().solve(MatrixD::Identity(l.rows(), l.cols()));
  return inv.template cast<Scalar>();
}

/// ||a - b||_F / ||b||_F (0 when both vanish).
template <typename DerivedA, typename DerivedB>
double relative_frobenius(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  const double denom = b.template cast<double>().norm();
  const double num = (a.template cast<double>() - b.template cast<double>()).norm();
  if (denom == 0.0) return num;
  return num / denom;
}

}  // namespace familykit

#endif  // FAMILYKIT_LINALG_HPP
