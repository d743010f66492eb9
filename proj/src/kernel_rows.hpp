#pragma once

// Per-row building blocks shared by the serial and OpenMP kernels. Each helper
// produces one output row with a fixed reduction order, which is what makes
// the two kernel sets bitwise identical.

#include <cmath>
#include <cstddef>

namespace watk::kernels::detail {

inline double dot(const double* x, const double* y, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

inline void gemm_nt_row(const double* a_row, const double* b, double* c_row, std::size_t n,
                        std::size_t k) {
  for (std::size_t j = 0; j < n; ++j) c_row[j] += dot(a_row, b + j * k, k);
}

inline void gemm_nn_row(const double* a_row, const double* b, double* c_row, std::size_t n,
                        std::size_t k) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    if (av != 0.0) axpy(av, b + p * n, c_row, n);
  }
}

inline void gemm_tn_row(const double* a, std::size_t i, std::size_t m, const double* b,
                        double* c_row, std::size_t n, std::size_t k) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a[p * m + i];
    if (av != 0.0) axpy(av, b + p * n, c_row, n);
  }
}

inline void wanda_row(const double* w_row, const double* norms, double* s_row, std::size_t cols) {
  for (std::size_t j = 0; j < cols; ++j) s_row[j] = std::fabs(w_row[j]) * norms[j];
}

inline double row_norm(const double* x_row, std::size_t cols) {
  return std::sqrt(dot(x_row, x_row, cols));
}

}  // namespace watk::kernels::detail
