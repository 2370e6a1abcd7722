#pragma once

// Dense float kernels behind the autodiff layer.
//
// Every kernel has a scalar reference implementation. An AVX2+FMA variant is
// compiled separately and chosen once per process at first use, after a CPU
// feature probe. MSTD_KERNELS=scalar forces the reference path.
//
// Matrices are row-major with explicit leading dimensions so callers can
// address column blocks (attention heads) without copying.

#include <cstddef>

namespace mstd::kernels {

struct KernelTable {
  const char* name;

  /// C[M,N] (+)= A[M,K] * B[K,N]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                  const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate);
  /// C[M,N] (+)= A[M,K] * B[N,K]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                  const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate);
  /// C[M,N] (+)= A[K,M]^T * B[K,N]
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
                  const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate);

  /// y += alpha * x
  void (*axpy)(std::size_t n, float alpha, const float* x, float* y);
  /// out = a * b elementwise
  void (*mul)(std::size_t n, const float* a, const float* b, float* out);

  /// One Adam update over a flat parameter. bc1/bc2 are the bias corrections
  /// 1 - beta^t. Bit-identical across variants (no fused multiply-add).
  void (*adam)(std::size_t n, float* param, const float* grad, float* m, float* v, float lr,
               float beta1, float beta2, float eps, float bc1, float bc2);
};

const KernelTable& scalar_table();

/// Null when the binary was built without the AVX2 variant or the CPU lacks
/// AVX2/FMA.
const KernelTable* avx2_table();

/// The table used by the library; selected once and fixed for the process.
const KernelTable& active();

}  // namespace mstd::kernels
