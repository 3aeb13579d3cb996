#include "glmask/kernels.hpp"

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace glmask::kernels {

namespace {

constexpr std::size_t kParallelFlops = 1u << 16;

inline void matmul_row(const double* __restrict a_row, const double* __restrict b,
                       double* __restrict c_row, std::size_t k, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) c_row[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double aip = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += aip * b_row[j];
  }
}

// Four rows at once so each row of b is streamed once per block. Every
// output element sees the same summation order as matmul_row.
inline void matmul_rows4(const double* __restrict a, const double* __restrict b,
                         double* __restrict c, std::size_t k, std::size_t n) {
  double* __restrict c0 = c;
  double* __restrict c1 = c + n;
  double* __restrict c2 = c + 2 * n;
  double* __restrict c3 = c + 3 * n;
  for (std::size_t j = 0; j < n; ++j) c0[j] = c1[j] = c2[j] = c3[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double a0 = a[p], a1 = a[k + p], a2 = a[2 * k + p], a3 = a[3 * k + p];
    const double* b_row = b + p * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double bj = b_row[j];
      c0[j] += a0 * bj;
      c1[j] += a1 * bj;
      c2[j] += a2 * bj;
      c3[j] += a3 * bj;
    }
  }
}

inline void matmul_block(const double* a, const double* b, double* c, std::size_t first,
                         std::size_t last, std::size_t k, std::size_t n) {
  std::size_t i = first;
  for (; i + 4 <= last; i += 4) matmul_rows4(a + i * k, b, c + i * n, k, n);
  for (; i < last; ++i) matmul_row(a + i * k, b, c + i * n, k, n);
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void matmul_serial(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  matmul_block(a, b, c, 0, m, k, n);
}

void matmul_parallel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  const auto blocks = static_cast<std::int64_t>((m + 3) / 4);
#pragma omp parallel for schedule(static)
  for (std::int64_t blk = 0; blk < blocks; ++blk) {
    const auto first = static_cast<std::size_t>(blk) * 4;
    matmul_block(a, b, c, first, std::min(first + 4, m), k, n);
  }
}

void bmm_serial(const double* a, const double* b, double* c, std::size_t batch, std::size_t m,
                std::size_t k, std::size_t n) {
  for (std::size_t t = 0; t < batch; ++t)
    matmul_serial(a + t * m * k, b + t * k * n, c + t * m * n, m, k, n);
}

void bmm_parallel(const double* a, const double* b, double* c, std::size_t batch, std::size_t m,
                  std::size_t k, std::size_t n) {
  const auto total = static_cast<std::int64_t>(batch * m);
#pragma omp parallel for schedule(static)
  for (std::int64_t idx = 0; idx < total; ++idx) {
    const auto t = static_cast<std::size_t>(idx) / m;
    const auto i = static_cast<std::size_t>(idx) % m;
    matmul_row(a + t * m * k + i * k, b + t * k * n, c + t * m * n + i * n, k, n);
  }
}

void transpose_serial(const double* in, double* out, std::size_t batch, std::size_t rows,
                      std::size_t cols) {
  for (std::size_t t = 0; t < batch; ++t) {
    const double* src = in + t * rows * cols;
    double* dst = out + t * rows * cols;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

void transpose_parallel(const double* in, double* out, std::size_t batch, std::size_t rows,
                        std::size_t cols) {
  const auto total = static_cast<std::int64_t>(batch * rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t idx = 0; idx < total; ++idx) {
    const auto t = static_cast<std::size_t>(idx) / rows;
    const auto r = static_cast<std::size_t>(idx) % rows;
    const double* src = in + t * rows * cols;
    double* dst = out + t * rows * cols;
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  if (max_threads() > 1 && m > 1 && m * k * n >= kParallelFlops)
    matmul_parallel(a, b, c, m, k, n);
  else
    matmul_serial(a, b, c, m, k, n);
}

void bmm(const double* a, const double* b, double* c, std::size_t batch, std::size_t m,
         std::size_t k, std::size_t n) {
  if (max_threads() > 1 && batch * m > 1 && batch * m * k * n >= kParallelFlops)
    bmm_parallel(a, b, c, batch, m, k, n);
  else
    bmm_serial(a, b, c, batch, m, k, n);
}

void transpose(const double* in, double* out, std::size_t batch, std::size_t rows,
               std::size_t cols) {
  if (max_threads() > 1 && batch * rows * cols >= kParallelFlops)
    transpose_parallel(in, out, batch, rows, cols);
  else
    transpose_serial(in, out, batch, rows, cols);
}

}  // namespace glmask::kernels
