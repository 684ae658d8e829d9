#if defined(__x86_64__) || defined(_M_X64)

#include "cfbench/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>

namespace cfbench::kernels::avx2 {

namespace {

inline float hsum256(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_hadd_ps(lo, lo);
  lo = _mm_hadd_ps(lo, lo);
  return _mm_cvtss_f32(lo);
}

}  // namespace

double sum_abs_diff(const float* a, const float* b, std::size_t n) {
  // Differencing and accumulation both in double so the metric layer gets
  // reference-grade precision regardless of the active backend.
  const __m256d sign_mask_d =
      _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffll));
  __m256d s = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d va = _mm256_cvtps_pd(_mm_loadu_ps(a + i));
    __m256d vb = _mm256_cvtps_pd(_mm_loadu_ps(b + i));
    s = _mm256_add_pd(s, _mm256_and_pd(_mm256_sub_pd(va, vb), sign_mask_d));
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, s);
  double acc = lanes[0] + lanes[1] + lanes[2] + lanes[3];
  for (; i < n; ++i) acc += std::fabs(double(a[i]) - double(b[i]));
  return acc;
}

double dot(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  std::size_t i = 0;
  constexpr std::size_t kBlock = 4096;
  while (i + 8 <= n) {
    const std::size_t end = std::min(n - (n - i) % 8, i + kBlock);
    __m256 s = _mm256_setzero_ps();
    for (; i + 8 <= end; i += 8) {
      s = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), s);
    }
    acc += double(hsum256(s));
  }
  for (; i < n; ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 vy = _mm256_loadu_ps(y + i);
    vy = _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), vy);
    _mm256_storeu_ps(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void clamp(float* x, std::size_t n, float lo, float hi) {
  const __m256 vlo = _mm256_set1_ps(lo);
  const __m256 vhi = _mm256_set1_ps(hi);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    v = _mm256_min_ps(_mm256_max_ps(v, vlo), vhi);
    _mm256_storeu_ps(x + i, v);
  }
  for (; i < n; ++i) x[i] = std::min(std::max(x[i], lo), hi);
}

void gemm(std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const __m256 va = _mm256_set1_ps(a[i * k + p]);
      const float* brow = b + p * n;
      std::size_t j = 0;
      for (; j + 16 <= n; j += 16) {
        __m256 c0 = _mm256_loadu_ps(crow + j);
        __m256 c1 = _mm256_loadu_ps(crow + j + 8);
        c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), c0);
        c1 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j + 8), c1);
        _mm256_storeu_ps(crow + j, c0);
        _mm256_storeu_ps(crow + j + 8, c1);
      }
      for (; j + 8 <= n; j += 8) {
        __m256 c0 = _mm256_loadu_ps(crow + j);
        c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), c0);
        _mm256_storeu_ps(crow + j, c0);
      }
      const float aip = a[i * k + p];
      for (; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_ta(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const __m256 va = _mm256_set1_ps(arow[i]);
      float* crow = c + i * n;
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8) {
        __m256 c0 = _mm256_loadu_ps(crow + j);
        c0 = _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j), c0);
        _mm256_storeu_ps(crow + j, c0);
      }
      for (; j < n; ++j) crow[j] += arow[i] * brow[j];
    }
  }
}

void gemm_tb(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      __m256 s = _mm256_setzero_ps();
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8) {
        s = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p), _mm256_loadu_ps(brow + p), s);
      }
      float acc = hsum256(s);
      for (; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

const Ops& ops() {
  static const Ops t{sum_abs_diff, dot, axpy, clamp, gemm, gemm_ta, gemm_tb};
  return t;
}

}  // namespace cfbench::kernels::avx2

#endif  // x86-64
