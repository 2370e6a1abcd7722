// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma;
// nothing here may run before dispatch has confirmed CPU support.

#include "mstd/kernels.hpp"

#if defined(MSTD_HAVE_AVX2)

#include <immintrin.h>

#include <cmath>
#include <cstring>

namespace mstd::kernels {
namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  __m128 shuf = _mm_movehdup_ps(lo);
  __m128 sums = _mm_add_ps(lo, shuf);
  shuf = _mm_movehl_ps(shuf, sums);
  sums = _mm_add_ss(sums, shuf);
  return _mm_cvtss_f32(sums);
}

// crow[0..n) += av * brow[0..n)
inline void row_fma(std::size_t n, float av, const float* brow, float* crow) {
  const __m256 a8 = _mm256_set1_ps(av);
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256 c8 = _mm256_loadu_ps(crow + j);
    c8 = _mm256_fmadd_ps(a8, _mm256_loadu_ps(brow + j), c8);
    _mm256_storeu_ps(crow + j, c8);
  }
  for (; j < n; ++j) crow[j] = std::fma(av, brow[j], crow[j]);
}

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * ldc;
    if (!accumulate) std::memset(crow, 0, n * sizeof(float));
    for (std::size_t p = 0; p < k; ++p) row_fma(n, a[i * lda + p], b + p * ldb, crow);
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * lda;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * ldb;
      __m256 acc8 = _mm256_setzero_ps();
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        acc8 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), acc8);
      }
      float acc = hsum(acc8);
      for (; p < k; ++p) acc = std::fma(arow[p], brow[p], acc);
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + acc : acc;
    }
  }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, std::size_t lda,
             const float* b, std::size_t ldb, float* c, std::size_t ldc, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m; ++i) std::memset(c + i * ldc, 0, n * sizeof(float));
  }
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * lda;
    const float* brow = b + p * ldb;
    for (std::size_t i = 0; i < m; ++i) row_fma(n, arow[i], brow, c + i * ldc);
  }
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  // Plain mul + add keeps this bit-identical to the scalar reference.
  const __m256 a8 = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 y8 = _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_mul_ps(a8, _mm256_loadu_ps(x + i)));
    _mm256_storeu_ps(y + i, y8);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void mul(std::size_t n, const float* a, const float* b, float* out) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void adam(std::size_t n, float* param, const float* grad, float* m, float* v, float lr,
          float beta1, float beta2, float eps, float bc1, float bc2) {
  const float one_m_b1 = 1.0f - beta1;
  const float one_m_b2 = 1.0f - beta2;
  const __m256 b1 = _mm256_set1_ps(beta1), b2 = _mm256_set1_ps(beta2);
  const __m256 c1 = _mm256_set1_ps(one_m_b1), c2 = _mm256_set1_ps(one_m_b2);
  const __m256 bc1v = _mm256_set1_ps(bc1), bc2v = _mm256_set1_ps(bc2);
  const __m256 lrv = _mm256_set1_ps(lr), epsv = _mm256_set1_ps(eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 g = _mm256_loadu_ps(grad + i);
    __m256 m8 = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(c1, g));
    __m256 v8 = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)),
                              _mm256_mul_ps(c2, _mm256_mul_ps(g, g)));
    _mm256_storeu_ps(m + i, m8);
    _mm256_storeu_ps(v + i, v8);
    const __m256 mhat = _mm256_div_ps(m8, bc1v);
    const __m256 vhat = _mm256_div_ps(v8, bc2v);
    const __m256 step =
        _mm256_div_ps(_mm256_mul_ps(lrv, mhat), _mm256_add_ps(_mm256_sqrt_ps(vhat), epsv));
    _mm256_storeu_ps(param + i, _mm256_sub_ps(_mm256_loadu_ps(param + i), step));
  }
  for (; i < n; ++i) {
    const float g = grad[i];
    m[i] = beta1 * m[i] + one_m_b1 * g;
    v[i] = beta2 * v[i] + one_m_b2 * (g * g);
    const float mhat = m[i] / bc1;
    const float vhat = v[i] / bc2;
    param[i] = param[i] - lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace

const KernelTable& avx2_table_unchecked() {
  static const KernelTable table{"avx2", gemm_nn, gemm_nt, gemm_tn, axpy, mul, adam};
  return table;
}

}  // namespace mstd::kernels

#endif  // MSTD_HAVE_AVX2
