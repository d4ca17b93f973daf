#pragma once

#include <Eigen/Core>

namespace bridgeprune::detail {

// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda,
          const T* b, int ldb, T beta, T* c, int ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const Mat, 0, Stride>;
  Eigen::Map<Mat, 0, Stride> cm(c, m, n, Stride(ldc));
  // stored shapes: A is m x k (or k x m), B is k x n (or n x k)
  const CMap am(a, trans_a ? k : m, trans_a ? m : k, Stride(lda));
  const CMap bm(b, trans_b ? n : k, trans_b ? k : n, Stride(ldb));
  if (beta == T{0}) {
    cm.setZero();
  } else if (beta != T{1}) {
    cm *= beta;
  }
  if (!trans_a && !trans_b) {
    cm.noalias() += alpha * am * bm;
  } else if (trans_a && !trans_b) {
    cm.noalias() += alpha * am.transpose() * bm;
  } else if (!trans_a) {
    cm.noalias() += alpha * am * bm.transpose();
  } else {
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  }
}

}  // namespace bridgeprune::detail
