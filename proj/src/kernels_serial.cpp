#include "watk/kernels.hpp"

#include "kernel_rows.hpp"

namespace watk::kernels::serial {

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_nt_row(a + i * k, b, c + i * n, n, k);
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_nn_row(a + i * k, b, c + i * n, n, k);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_tn_row(a, i, m, b, c + i * n, n, k);
}

void wanda(const double* w, const double* norms, double* s, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) detail::wanda_row(w + i * cols, norms, s + i * cols, cols);
}

void row_norms(const double* x, double* norms, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) norms[i] = detail::row_norm(x + i * cols, cols);
}

}  // namespace watk::kernels::serial
