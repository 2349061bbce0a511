#pragma once

#include <cstddef>

// Dense row-major kernels. All of them accumulate into C (C += ...), with the
// reduction index running in ascending order for every output element.
namespace unihema::kernels {

// C[m×n] += A[m×k] · B[k×n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// C[m×n] += A[m×k] · B[n×k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// C[m×n] += A[k×m]^T · B[k×n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n);
// out[c×r] = in[r×c]^T
void transpose(const double* in, double* out, std::size_t rows, std::size_t cols);

}  // namespace unihema::kernels
