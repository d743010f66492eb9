#include "watk/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "kernel_rows.hpp"

namespace watk::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 15;

std::atomic<Backend> g_backend{Backend::kParallel};

}  // namespace

namespace parallel {

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    detail::gemm_nt_row(a + i * k, b, c + i * n, n, k);
  }
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    detail::gemm_nn_row(a + i * k, b, c + i * n, n, k);
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    detail::gemm_tn_row(a, static_cast<std::size_t>(i), m, b, c + i * n, n, k);
  }
}

void wanda(const double* w, const double* norms, double* s, std::size_t rows, std::size_t cols) {
  const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < r; ++i) {
    detail::wanda_row(w + i * cols, norms, s + i * cols, cols);
  }
}

void row_norms(const double* x, double* norms, std::size_t rows, std::size_t cols) {
  const auto r = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelThreshold)
  for (std::ptrdiff_t i = 0; i < r; ++i) norms[i] = detail::row_norm(x + i * cols, cols);
}

}  // namespace parallel

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  if (backend() == Backend::kSerial) return serial::gemm_nt(a, b, c, m, n, k);
  parallel::gemm_nt(a, b, c, m, n, k);
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  if (backend() == Backend::kSerial) return serial::gemm_nn(a, b, c, m, n, k);
  parallel::gemm_nn(a, b, c, m, n, k);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  if (backend() == Backend::kSerial) return serial::gemm_tn(a, b, c, m, n, k);
  parallel::gemm_tn(a, b, c, m, n, k);
}

void wanda(const double* w, const double* norms, double* s, std::size_t rows, std::size_t cols) {
  if (backend() == Backend::kSerial) return serial::wanda(w, norms, s, rows, cols);
  parallel::wanda(w, norms, s, rows, cols);
}

void row_norms(const double* x, double* norms, std::size_t rows, std::size_t cols) {
  if (backend() == Backend::kSerial) return serial::row_norms(x, norms, rows, cols);
  parallel::row_norms(x, norms, rows, cols);
}

}  // namespace watk::kernels
