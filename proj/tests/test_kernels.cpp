#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "cfbench/kernels.hpp"
#include "cfbench/rng.hpp"

using namespace cfbench;

namespace {

std::vector<float> random_vec(Rng& rng, std::size_t n, float scale = 1.0f) {
  std::vector<float> v(n);
  for (float& x : v) x = float(rng.uniform(-scale, scale));
  return v;
}

}  // namespace

TEST_CASE("scalar kernels match hand computations") {
  const std::vector<float> a = {1.0f, -2.0f, 3.0f};
  const std::vector<float> b = {0.5f, 0.0f, -1.0f};
  CHECK(kernels::scalar::sum_abs_diff(a.data(), b.data(), 3) == doctest::Approx(6.5));
  CHECK(kernels::scalar::dot(a.data(), b.data(), 3) == doctest::Approx(-2.5));

  std::vector<float> y = b;
  kernels::scalar::axpy(2.0f, a.data(), y.data(), 3);
  CHECK(y[0] == doctest::Approx(2.5));
  CHECK(y[1] == doctest::Approx(-4.0));
  CHECK(y[2] == doctest::Approx(5.0));

  std::vector<float> c = {-1.0f, 0.5f, 2.0f};
  kernels::scalar::clamp(c.data(), 3, 0.0f, 1.0f);
  CHECK(c == std::vector<float>{0.0f, 0.5f, 1.0f});
}

TEST_CASE("scalar gemm variants agree with naive triple loop") {
  Rng rng(11);
  const std::size_t m = 7, n = 13, k = 9;
  const auto A = random_vec(rng, m * k);
  const auto B = random_vec(rng, k * n);

  std::vector<float> ref(m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) ref[i * n + j] += A[i * k + p] * B[p * n + j];

  std::vector<float> c1(m * n, 0.0f);
  kernels::scalar::gemm(m, n, k, A.data(), B.data(), c1.data());

  // A^T layout: store A as (k x m).
  std::vector<float> At(k * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) At[p * m + i] = A[i * k + p];
  std::vector<float> c2(m * n, 0.0f);
  kernels::scalar::gemm_ta(m, n, k, At.data(), B.data(), c2.data());

  std::vector<float> Bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) Bt[j * k + p] = B[p * n + j];
  // gemm_tb takes B in (n x k) layout.
  std::vector<float> c3(m * n, 0.0f);
  kernels::scalar::gemm_tb(m, n, k, A.data(), Bt.data(), c3.data());

  for (std::size_t i = 0; i < m * n; ++i) {
    CHECK(c1[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    CHECK(c2[i] == doctest::Approx(ref[i]).epsilon(1e-4));
    CHECK(c3[i] == doctest::Approx(ref[i]).epsilon(1e-4));
  }
}

#ifdef CFBENCH_HAVE_AVX2_BUILD
TEST_CASE("avx2 kernels are equivalent to scalar reference") {
  if (!kernels::set_active("avx2")) {
    MESSAGE("avx2 unavailable on this machine, skipping");
    return;
  }
  Rng rng(42);
  for (std::size_t n : {1ul, 7ul, 8ul, 31ul, 1000ul, 32768ul}) {
    const auto a = random_vec(rng, n, 2.0f);
    const auto b = random_vec(rng, n, 2.0f);
    CHECK(kernels::avx2::sum_abs_diff(a.data(), b.data(), n) ==
          doctest::Approx(kernels::scalar::sum_abs_diff(a.data(), b.data(), n))
              .epsilon(1e-5));
    CHECK(kernels::avx2::dot(a.data(), b.data(), n) ==
          doctest::Approx(kernels::scalar::dot(a.data(), b.data(), n)).epsilon(1e-4));

    auto y1 = b, y2 = b;
    kernels::scalar::axpy(0.37f, a.data(), y1.data(), n);
    kernels::avx2::axpy(0.37f, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y1[i] == doctest::Approx(y2[i]));

    auto c1 = a, c2 = a;
    kernels::scalar::clamp(c1.data(), n, 0.0f, 1.0f);
    kernels::avx2::clamp(c2.data(), n, 0.0f, 1.0f);
    CHECK(c1 == c2);
  }

  for (auto [m, n, k] : {std::array<std::size_t, 3>{5, 17, 3},
                         std::array<std::size_t, 3>{16, 64, 33},
                         std::array<std::size_t, 3>{3, 9, 128}}) {
    const auto A = random_vec(rng, m * k);
    const auto B = random_vec(rng, k * n);
    const auto Bt = random_vec(rng, n * k);
    const auto At = random_vec(rng, k * m);
    std::vector<float> r1(m * n, 0.0f), r2(m * n, 0.0f);

    kernels::scalar::gemm(m, n, k, A.data(), B.data(), r1.data());
    kernels::avx2::gemm(m, n, k, A.data(), B.data(), r2.data());
    for (std::size_t i = 0; i < m * n; ++i)
      CHECK(r1[i] == doctest::Approx(r2[i]).epsilon(1e-4));

    std::fill(r1.begin(), r1.end(), 0.0f);
    std::fill(r2.begin(), r2.end(), 0.0f);
    kernels::scalar::gemm_ta(m, n, k, At.data(), B.data(), r1.data());
    kernels::avx2::gemm_ta(m, n, k, At.data(), B.data(), r2.data());
    for (std::size_t i = 0; i < m * n; ++i)
      CHECK(r1[i] == doctest::Approx(r2[i]).epsilon(1e-4));

    std::fill(r1.begin(), r1.end(), 0.0f);
    std::fill(r2.begin(), r2.end(), 0.0f);
    kernels::scalar::gemm_tb(m, n, k, A.data(), Bt.data(), r1.data());
    kernels::avx2::gemm_tb(m, n, k, A.data(), Bt.data(), r2.data());
    for (std::size_t i = 0; i < m * n; ++i)
      CHECK(r1[i] == doctest::Approx(r2[i]).epsilon(1e-4));
  }
  kernels::set_active(kernels::active_name());
}
#endif

TEST_CASE("dispatch selects a backend") {
  CHECK((kernels::active_name() == "avx2" || kernels::active_name() == "scalar"));
  CHECK(kernels::set_active("scalar"));
  CHECK(kernels::active_name() == "scalar");
  CHECK_FALSE(kernels::set_active("nonsense"));
#ifdef CFBENCH_HAVE_AVX2_BUILD
  if (__builtin_cpu_supports("avx2")) CHECK(kernels::set_active("avx2"));
#endif
}
