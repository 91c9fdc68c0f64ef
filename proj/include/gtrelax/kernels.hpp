// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense compute kernels. Every kernel has a naive serial reference that is
// kept for testing and benchmarking, and an OpenMP version used by the
// library. Within one kernel each output element is accumulated by a single
// thread in a fixed order, so results do not depend on the thread count.

#include <cstddef>

namespace gtrelax::kernels {

enum class Trans { no, yes };

/// C (m x n) += op(A) * op(B), op(A) is m x k and op(B) is k x n.
/// Leading dimensions are the row lengths of the stored matrices.
void gemm_serial(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, const double* a, const double* b, double* c);

void gemm_omp(Trans ta, Trans tb, std::size_t m, std::size_t n,
              std::size_t k, const double* a, const double* b, double* c);

/// Library entry point; dispatches to the OpenMP kernel.
inline void gemm(Trans ta, Trans tb, std::size_t m, std::size_t n,
                 std::size_t k, const double* a, const double* b, double* c) {
  gemm_omp(ta, tb, m, n, k, a, b, c);
}

/// Work threshold (m*n*k) below which the OpenMP kernel stays sequential.
inline constexpr std::size_t kParallelGemmWork = std::size_t{1} << 18;

}  // namespace gtrelax::kernels
