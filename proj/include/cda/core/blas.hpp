#pragma once

#include <cblas.h>

namespace cda {

// C[m,n] = alpha * op(A)[m,k] * op(B)[k,n] + beta * C, row-major.
// lda/ldb are the leading dimensions of the *stored* matrices.
template <class T>
void gemm(bool trans_a, bool trans_b, long m, long n, long k, T alpha, const T* a, long lda,
          const T* b, long ldb, T beta, T* c, long ldc);

template <>
inline void gemm<float>(bool trans_a, bool trans_b, long m, long n, long k, float alpha,
                        const float* a, long lda, const float* b, long ldb, float beta, float* c,
                        long ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, alpha, a, (int)lda, b,
                (int)ldb, beta, c, (int)ldc);
}

template <>
inline void gemm<double>(bool trans_a, bool trans_b, long m, long n, long k, double alpha,
                         const double* a, long lda, const double* b, long ldb, double beta,
                         double* c, long ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, (int)m, (int)n, (int)k, alpha, a, (int)lda, b,
                (int)ldb, beta, c, (int)ldc);
}

}  // namespace cda
