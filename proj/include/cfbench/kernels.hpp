#pragma once

// Data-parallel inner loops used by the metric and model math.
//
// Every kernel has a scalar reference implementation (kernels::scalar) and,
// on x86-64 with AVX2+FMA, a vectorized variant (kernels::avx2). The
// dispatch table picks the best available implementation at startup; tests
// check scalar/SIMD equivalence on random inputs.

#include <cstddef>
#include <string>

namespace cfbench::kernels {

struct Ops {
  // sum_i |a[i] - b[i]|, accumulated in double.
  double (*sum_abs_diff)(const float* a, const float* b, std::size_t n);
  // sum_i a[i]*b[i], accumulated in double.
  double (*dot)(const float* a, const float* b, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(float alpha, const float* x, float* y, std::size_t n);
  // x[i] = min(max(x[i], lo), hi)
  void (*clamp)(float* x, std::size_t n, float lo, float hi);
  // C(m x n) += A(m x k) * B(k x n), all row-major.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k,
               const float* a, const float* b, float* c);
  // C(m x n) += A^T * B with A stored (k x m), B (k x n).
  void (*gemm_ta)(std::size_t m, std::size_t n, std::size_t k,
                  const float* a, const float* b, float* c);
  // C(m x n) += A * B^T with A (m x k), B stored (n x k).
  void (*gemm_tb)(std::size_t m, std::size_t n, std::size_t k,
                  const float* a, const float* b, float* c);
};

namespace scalar {
double sum_abs_diff(const float* a, const float* b, std::size_t n);
double dot(const float* a, const float* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void clamp(float* x, std::size_t n, float lo, float hi);
void gemm(std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c);
void gemm_ta(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);
void gemm_tb(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);
const Ops& ops();
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define CFBENCH_HAVE_AVX2_BUILD 1
namespace avx2 {
double sum_abs_diff(const float* a, const float* b, std::size_t n);
double dot(const float* a, const float* b, std::size_t n);
void axpy(float alpha, const float* x, float* y, std::size_t n);
void clamp(float* x, std::size_t n, float lo, float hi);
void gemm(std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c);
void gemm_ta(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);
void gemm_tb(std::size_t m, std::size_t n, std::size_t k,
             const float* a, const float* b, float* c);
const Ops& ops();
}  // namespace avx2
#endif

// Best implementation for this machine, resolved once at first use.
const Ops& active();
// Name of the active backend ("scalar" or "avx2").
const std::string& active_name();
// Force a backend by name; returns false if unavailable. Used by tests.
bool set_active(const std::string& name);

}  // namespace cfbench::kernels
