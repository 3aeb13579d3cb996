#pragma once

#include <cstddef>

// Dense numeric kernels behind the tensor ops. Every kernel has a serial
// reference and an OpenMP version. Both accumulate each output element in
// the same order, so their results are bit-identical for any thread count.
namespace glmask::kernels {

// C[m,n] = A[m,k] * B[k,n], row-major, C overwritten.
void matmul_serial(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n);
void matmul_parallel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n);

// Batched: `batch` independent products laid out back to back.
void bmm_serial(const double* a, const double* b, double* c, std::size_t batch, std::size_t m,
                std::size_t k, std::size_t n);
void bmm_parallel(const double* a, const double* b, double* c, std::size_t batch, std::size_t m,
                  std::size_t k, std::size_t n);

// out[r, c] = in[c, r] over `batch` matrices of shape [rows, cols].
void transpose_serial(const double* in, double* out, std::size_t batch, std::size_t rows,
                      std::size_t cols);
void transpose_parallel(const double* in, double* out, std::size_t batch, std::size_t rows,
                        std::size_t cols);

// Dispatchers: the parallel path is taken when the work is large enough and
// more than one thread is available.
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n);
void bmm(const double* a, const double* b, double* c, std::size_t batch, std::size_t m,
         std::size_t k, std::size_t n);
void transpose(const double* in, double* out, std::size_t batch, std::size_t rows,
               std::size_t cols);

int max_threads();

}  // namespace glmask::kernels
