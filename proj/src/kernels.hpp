#pragma once

#include <cstddef>

namespace mmdit::kernels {

// c[m x n] += a[m x k] * b[k x n], row-major. Each output element accumulates
// over k in increasing order, so results do not depend on vector width.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = arow[t];
      const double* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// dst[cols x rows] = src[rows x cols]^T.
inline void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace mmdit::kernels
