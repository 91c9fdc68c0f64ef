// SPDX-License-Identifier: Apache-2.0
#include "gtrelax/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "gtrelax/kernels.hpp"

namespace gtrelax {

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul: " + std::to_string(a.rows) + "x" +
                                std::to_string(a.cols) + " times " +
                                std::to_string(b.rows) + "x" +
                                std::to_string(b.cols));
  }
  Matrix c(a.rows, b.cols);
  kernels::gemm(kernels::Trans::no, kernels::Trans::no, a.rows, b.cols, a.cols,
                a.data.data(), b.data.data(), c.data.data());
  return c;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    d = std::max(d, std::abs(a.data[i] - b.data[i]));
  return d;
}

}  // namespace gtrelax
