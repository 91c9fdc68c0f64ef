// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/kernels.hpp"

#include <cstddef>

namespace gtrelax::kernels {

namespace {

// Row i of C. Loop order keeps the inner loop contiguous in B and C.
inline void gemm_row(Trans ta, Trans tb, std::size_t i, std::size_t m,
                     std::size_t n, std::size_t k, const double* a,
                     const double* b, double* c) {
  double* crow = c + i * n;
  if (tb == Trans::no) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta == Trans::no ? a[i * k + p] : a[p * m + i];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      if (ta == Trans::no) {
        const double* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      } else {
        for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
      }
      crow[j] += acc;
    }
  }
}

}  // namespace

void gemm_serial(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == Trans::no ? a[i * k + p] : a[p * m + i];
        const double bv = tb == Trans::no ? b[p * n + j] : b[j * k + p];
        acc += av * bv;
      }
      c[i * n + j] += acc;
    }
  }
}

void gemm_omp(Trans ta, Trans tb, std::size_t m, std::size_t n, std::size_t k,
              const double* a, const double* b, double* c) {
  const bool parallel = m * n * k >= kParallelGemmWork;
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (parallel)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    gemm_row(ta, tb, static_cast<std::size_t>(i), m, n, k, a, b, c);
  }
}

}  // namespace gtrelax::kernels
