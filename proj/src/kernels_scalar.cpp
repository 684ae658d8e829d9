#include "cfbench/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace cfbench::kernels::scalar {

double sum_abs_diff(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::fabs(double(a[i]) - double(b[i]));
  return acc;
}

double dot(const float* a, const float* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

void axpy(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void clamp(float* x, std::size_t n, float lo, float hi) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::min(std::max(x[i], lo), hi);
}

void gemm(std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const float aip = a[i * k + p];
      const float* brow = b + p * n;
      float* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_ta(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c) {
  // A stored (k x m): C[i][j] += sum_p A[p][i] * B[p][j]
  for (std::size_t p = 0; p < k; ++p) {
    const float* arow = a + p * m;
    const float* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const float api = arow[i];
      float* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

void gemm_tb(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c) {
  // B stored (n x k): C[i][j] += dot(A[i,:], B[j,:])
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const float* brow = b + j * k;
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

const Ops& ops() {
  static const Ops t{sum_abs_diff, dot, axpy, clamp, gemm, gemm_ta, gemm_tb};
  return t;
}

}  // namespace cfbench::kernels::scalar
