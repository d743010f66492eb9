#include "watk/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "kernel_rows.hpp"

namespace watk {

namespace {

using kernels::detail::axpy;
using kernels::detail::dot;

// Rotate rows i and j of a row-major buffer (each row length `len`).
void rotate_rows(double* base, std::size_t i, std::size_t j, std::size_t len, double c,
                 double s) {
  double* ri = base + i * len;
  double* rj = base + j * len;
  for (std::size_t p = 0; p < len; ++p) {
    const double xi = ri[p];
    const double xj = rj[p];
    ri[p] = c * xi - s * xj;
    rj[p] = s * xi + c * xj;
  }
}

// Hestenes one-sided Jacobi. `cols` holds the columns of the matrix as rows
// (k x len); on exit they are mutually orthogonal. `vt` (k x k, starts as I)
// accumulates the same rotations, so A V = cols^T with V = vt^T.
//
// A pair is rotated while |<a_i,a_j>| > tol * ||a_i|| ||a_j||; this per-pair
// relative test is stricter than bounding the total off-diagonal mass.
void jacobi_orthogonalize(Matrix& cols, Matrix& vt) {
  const std::size_t k = cols.rows();
  const std::size_t len = cols.cols();
  const double tol =
      std::numeric_limits<double>::epsilon() * std::max(1.0, std::sqrt(static_cast<double>(len)));
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t i = 0; i + 1 < k; ++i) {
      for (std::size_t j = i + 1; j < k; ++j) {
        const double* ci = cols.data() + i * len;
        const double* cj = cols.data() + j * len;
        const double alpha = dot(ci, ci, len);
        const double beta = dot(cj, cj, len);
        const double gamma = dot(ci, cj, len);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::fabs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate_rows(cols.data(), i, j, len, c, s);
        rotate_rows(vt.data(), i, j, k, c, s);
        rotated = true;
      }
    }
    if (!rotated) return;
  }
}

// Flip so that the first component with magnitude above 1e-10 * max is positive.
bool needs_flip(std::span<const double> v) {
  double mx = 0.0;
  for (double x : v) mx = std::max(mx, std::fabs(x));
  if (mx == 0.0) return false;
  for (double x : v) {
    if (std::fabs(x) > 1e-10 * mx) return x < 0.0;
  }
  return false;
}

// SVD of a matrix given by its columns stored as rows (k x len, len >= k is
// not required). Returns left vectors as rows of `ut` (k x len), sigma, and
// right vectors as rows of `vt` (k x k).
struct RowSvd {
  Matrix ut;
  Vector sigma;
  Matrix vt;
};

RowSvd jacobi_svd_rows(Matrix cols) {
  const std::size_t k = cols.rows();
  const std::size_t len = cols.cols();
  Matrix vt = Matrix::identity(k);
  jacobi_orthogonalize(cols, vt);

  Vector norms(k);
  for (std::size_t i = 0; i < k; ++i) norms[i] = std::sqrt(dot(cols.data() + i * len, cols.data() + i * len, len));
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  RowSvd out{Matrix(k, len), Vector(k), Matrix(k, k)};
  for (std::size_t r = 0; r < k; ++r) {
    const std::size_t src = order[r];
    out.sigma[r] = norms[src];
    auto urow = out.ut.row(r);
    auto vrow = out.vt.row(r);
    const auto crow = cols.row(src);
    const auto vsrc = vt.row(src);
    if (norms[src] > 0.0) {
      for (std::size_t p = 0; p < len; ++p) urow[p] = crow[p] / norms[src];
    }
    std::copy(vsrc.begin(), vsrc.end(), vrow.begin());
  }
  return out;
}

}  // namespace

QrResult householder_qr(const Matrix& a, bool want_q) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  if (m < n) throw std::invalid_argument("householder_qr: expects rows >= cols");
  // Work on columns stored as rows.
  Matrix cols = a.transposed();
  Matrix reflectors(n, m);  // row k holds v_k in entries [k, m)
  Vector vnorm2(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double* ck = cols.data() + k * m;
    const double xnorm = std::sqrt(dot(ck + k, ck + k, m - k));
    double* v = reflectors.data() + k * m;
    if (xnorm == 0.0) continue;
    const double alpha = ck[k] >= 0.0 ? -xnorm : xnorm;
    for (std::size_t p = k; p < m; ++p) v[p] = ck[p];
    v[k] -= alpha;
    vnorm2[k] = dot(v + k, v + k, m - k);
    if (vnorm2[k] == 0.0) continue;
    for (std::size_t j = k; j < n; ++j) {
      double* cj = cols.data() + j * m;
      const double f = 2.0 * dot(v + k, cj + k, m - k) / vnorm2[k];
      axpy(-f, v + k, cj + k, m - k);
    }
  }
  QrResult out;
  out.r = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) out.r(i, j) = cols(j, i);
  if (want_q) {
    Matrix qt(n, m);  // columns of Q as rows
    for (std::size_t j = 0; j < n; ++j) qt(j, j) = 1.0;
    for (std::size_t kk = n; kk-- > 0;) {
      if (vnorm2[kk] == 0.0) continue;
      const double* v = reflectors.data() + kk * m;
      for (std::size_t j = 0; j < n; ++j) {
        double* qj = qt.data() + j * m;
        const double f = 2.0 * dot(v + kk, qj + kk, m - kk) / vnorm2[kk];
        axpy(-f, v + kk, qj + kk, m - kk);
      }
    }
    out.q = qt.transposed();
  }
  return out;
}

namespace {

void flip_column(Matrix& m, std::size_t c) {
  for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) = -m(r, c);
}

// Tall-or-square SVD (rows >= cols). Sign convention applied by the caller.
SvdResult tall_svd(const Matrix& a, bool want_u) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Jacobi runs on the n x n triangular factor when the matrix is tall.
  const bool reduce = m >= 2 * n;
  Matrix q;
  Matrix cols;
  if (reduce) {
    QrResult qr = householder_qr(a, want_u);
    q = std::move(qr.q);
    cols = qr.r.transposed();
  } else {
    cols = a.transposed();
  }
  RowSvd rs = jacobi_svd_rows(std::move(cols));
  SvdResult out;
  out.sigma = std::move(rs.sigma);
  if (want_u) out.u = reduce ? matmul(q, rs.ut.transposed()) : rs.ut.transposed();
  out.v = rs.vt.transposed();
  return out;
}

}  // namespace

SvdResult thin_svd(const Matrix& a, bool want_v) {
  if (a.empty()) throw std::invalid_argument("thin_svd: empty matrix");
  if (!a.all_finite()) throw std::invalid_argument("thin_svd: non-finite entries");
  SvdResult out;
  if (a.rows() < a.cols()) {
    // A^T = U' S V'^T  =>  A = V' S U'^T
    SvdResult t = tall_svd(a.transposed(), want_v);
    out.u = std::move(t.v);
    out.sigma = std::move(t.sigma);
    if (want_v) out.v = std::move(t.u);
  } else {
    out = tall_svd(a, true);
    if (!want_v) out.v = Matrix();
  }
  for (std::size_t c = 0; c < out.u.cols(); ++c) {
    if (out.sigma[c] > 0.0 && needs_flip(out.u.column(c))) {
      flip_column(out.u, c);
      if (want_v) flip_column(out.v, c);
    }
  }
  return out;
}

std::size_t numerical_rank(const Vector& sigma, double rel_tol) {
  if (sigma.empty()) return 0;
  const double top = *std::max_element(sigma.begin(), sigma.end());
  if (top <= 0.0) return 0;
  return static_cast<std::size_t>(
      std::count_if(sigma.begin(), sigma.end(), [&](double s) { return s > rel_tol * top; }));
}

Matrix orthonormalize_columns(const Matrix& a, double rel_tol) {
  const std::size_t m = a.rows();
  Matrix cols = a.transposed();
  double scale = 0.0;
  for (std::size_t j = 0; j < cols.rows(); ++j)
    scale = std::max(scale, std::sqrt(dot(cols.data() + j * m, cols.data() + j * m, m)));
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < cols.rows(); ++j) {
    double* cj = cols.data() + j * m;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t kidx : kept) {
        const double* ck = cols.data() + kidx * m;
        axpy(-dot(ck, cj, m), ck, cj, m);
      }
    }
    const double nrm = std::sqrt(dot(cj, cj, m));
    if (nrm <= rel_tol * scale || nrm == 0.0) continue;
    for (std::size_t p = 0; p < m; ++p) cj[p] /= nrm;
    kept.push_back(j);
  }
  Matrix out(m, kept.size());
  for (std::size_t c = 0; c < kept.size(); ++c) out.set_column(c, cols.row(kept[c]));
  return out;
}

Matrix leading_columns(const Matrix& a, std::size_t count) {
  if (count > a.cols()) throw std::invalid_argument("leading_columns: count exceeds columns");
  Matrix out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = a(r, c);
  return out;
}

}  // namespace watk
