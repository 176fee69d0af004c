#pragma once

#include "vrwkv/core.hpp"

#include <concepts>
#include <string>

namespace vrwkv {

// Dense products with a fixed accumulation order: every output entry is
// summed over the inner index in ascending order, one term at a time. This
// keeps results bit-identical from run to run regardless of blocking.

/// c = a * b, with c already sized (a.rows() x b.cols()).
template <typename DerivedA, typename DerivedB, typename Scalar>
void matmul_into(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                 RowMatrix<Scalar>& c) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner extents " + std::to_string(a.cols()) + " and " +
                         std::to_string(b.rows()) + " disagree");
  }
  const Eigen::Ref<const RowMatrix<Scalar>> lhs(a);
  const Eigen::Ref<const RowMatrix<Scalar>> rhs(b);
  c.setZero(lhs.rows(), rhs.cols());
  for (Index i = 0; i < lhs.rows(); ++i) {
    for (Index k = 0; k < lhs.cols(); ++k) {
      c.row(i).noalias() += lhs(i, k) * rhs.row(k);
    }
  }
}

template <typename DerivedA, typename DerivedB>
RowMatrix<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
  RowMatrix<typename DerivedA::Scalar> c;
  matmul_into(a, b, c);
  return c;
}

/// c = aᵀ * b without materializing aᵀ.
template <typename DerivedA, typename DerivedB, typename Scalar>
void matmul_tn_into(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                    RowMatrix<Scalar>& c) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: inner extents " + std::to_string(a.rows()) + " and " +
                         std::to_string(b.rows()) + " disagree");
  }
  const Eigen::Ref<const RowMatrix<Scalar>> lhs(a);
  const Eigen::Ref<const RowMatrix<Scalar>> rhs(b);
  c.setZero(lhs.cols(), rhs.cols());
  for (Index k = 0; k < lhs.rows(); ++k) {
    for (Index i = 0; i < lhs.cols(); ++i) {
      c.row(i).noalias() += lhs(k, i) * rhs.row(k);
    }
  }
}

template <typename DerivedA, typename DerivedB>
RowMatrix<typename DerivedA::Scalar> matmul_tn(const Eigen::MatrixBase<DerivedA>& a,
                                               const Eigen::MatrixBase<DerivedB>& b) {
  RowMatrix<typename DerivedA::Scalar> c;
  matmul_tn_into(a, b, c);
  return c;
}

/// Logistic function, evaluated without overflow for large |x|.
template <std::floating_point Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-x));
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& x) {
  return x.unaryExpr([](typename Derived::Scalar v) { return sigmoid(v); });
}

template <typename Derived>
auto relu_sq(const Eigen::ArrayBase<Derived>& x) {
  return x.max(typename Derived::Scalar(0)).square();
}

/// Row-wise softmax, each row shifted by its maximum.
template <typename Scalar>
void softmax_rows_inplace(RowMatrix<Scalar>& x) {
  for (Index i = 0; i < x.rows(); ++i) {
    auto row = x.row(i).array();
    row = (row - row.maxCoeff()).exp();
    row /= row.sum();
  }
}

}  // namespace vrwkv
