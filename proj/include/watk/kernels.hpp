#pragma once

// Dense kernels used by the forward/backward passes and the decompositions.
//
// Every kernel exists twice: a serial reference in `watk::kernels::serial`
// and an OpenMP version in `watk::kernels::parallel`. The reference is the
// ground truth in tests; the parallel variants must agree with it bitwise,
// since each output element is reduced in the same order by one thread.
//
// Layout: all buffers are row-major. Shapes are given as (rows x cols).

#include <cstddef>

namespace watk::kernels {

namespace serial {

/// C (m x n) += A (m x k) * B^T, B is (n x k).
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
/// C (m x n) += A (m x k) * B (k x n).
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
/// C (m x n) += A^T * B, A is (k x m), B is (k x n).
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
/// Wanda score: S_ij = |W_ij| * norms_j, W is (rows x cols).
void wanda(const double* w, const double* norms, double* s, std::size_t rows, std::size_t cols);
/// norms_i = || row i of X ||_2, X is (rows x cols).
void row_norms(const double* x, double* norms, std::size_t rows, std::size_t cols);

}  // namespace serial

namespace parallel {

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
void wanda(const double* w, const double* norms, double* s, std::size_t rows, std::size_t cols);
void row_norms(const double* x, double* norms, std::size_t rows, std::size_t cols);

}  // namespace parallel

/// Number of threads the parallel kernels will use (1 when built without OpenMP).
int max_threads();

/// Kernel set used by the library entry points (`matmul`, forward, scoring).
/// Defaults to parallel; tests pin it to serial for reference runs.
enum class Backend { kSerial, kParallel };
void set_backend(Backend b);
Backend backend();

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k);
void wanda(const double* w, const double* norms, double* s, std::size_t rows, std::size_t cols);
void row_norms(const double* x, double* norms, std::size_t rows, std::size_t cols);

}  // namespace watk::kernels
