#pragma once

#include <cstddef>

#include "watk/tensor.hpp"

namespace watk {

/// Thin SVD A = U diag(sigma) V^T with k = min(rows, cols) components,
/// sigma sorted non-increasing. Each column of U has its first significant
/// component made positive (V follows), so results are reproducible.
struct SvdResult {
  Matrix u;       // rows x k
  Vector sigma;   // k
  Matrix v;       // cols x k, empty unless requested
};

/// One-sided (Hestenes) Jacobi SVD in 64-bit. Tall inputs are first reduced
/// with a Householder QR so the rotations run on the small square factor.
/// Pass want_v = false when only left singular vectors are needed.
SvdResult thin_svd(const Matrix& a, bool want_v = true);

/// Count of singular values above rel_tol * sigma_max.
std::size_t numerical_rank(const Vector& sigma, double rel_tol = 1e-10);

struct QrResult {
  Matrix q;  // m x n, orthonormal columns
  Matrix r;  // n x n, upper triangular
};

/// Householder QR of a tall matrix (rows >= cols).
QrResult householder_qr(const Matrix& a, bool want_q = true);

/// Orthonormal basis for the column span of `a` (columns processed in order,
/// re-orthogonalized once). Columns numerically dependent on earlier ones are
/// dropped.
Matrix orthonormalize_columns(const Matrix& a, double rel_tol = 1e-10);

/// First `count` columns of `a`.
Matrix leading_columns(const Matrix& a, std::size_t count);

}  // namespace watk
