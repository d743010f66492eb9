#include <gtest/gtest.h>

#include <Eigen/SVD>

#include "test_util.hpp"
#include "watk/linalg.hpp"

namespace watk {
namespace {

using testing::random_matrix;
using testing::to_eigen;

Matrix reconstruct(const SvdResult& s) {
  Matrix us = s.u;
  for (std::size_t c = 0; c < us.cols(); ++c)
    for (std::size_t r = 0; r < us.rows(); ++r) us(r, c) *= s.sigma[c];
  return matmul_nt(us, s.v);
}

double orthonormality_error(const Matrix& u) {
  return (matmul_tn(u, u) - Matrix::identity(u.cols())).frobenius_norm();
}

class SvdShapes : public ::testing::TestWithParam<std::pair<int, int>> {};

TEST_P(SvdShapes, MatchesEigenAndReconstructs) {
  const auto [m, n] = GetParam();
  const Matrix a = random_matrix(m, n, 17 + m * 31 + n);
  const SvdResult s = thin_svd(a);
  ASSERT_EQ(s.sigma.size(), static_cast<std::size_t>(std::min(m, n)));
  EXPECT_LT(relative_error(reconstruct(s), a), 1e-12);
  EXPECT_LT(orthonormality_error(s.u), 1e-12);
  EXPECT_LT(orthonormality_error(s.v), 1e-12);

  Eigen::JacobiSVD<Eigen::MatrixXd> oracle(to_eigen(a));
  const auto& sv = oracle.singularValues();
  for (Eigen::Index i = 0; i < sv.size(); ++i) EXPECT_NEAR(s.sigma[i], sv(i), 1e-12 * sv(0));
  for (std::size_t i = 1; i < s.sigma.size(); ++i) EXPECT_GE(s.sigma[i - 1], s.sigma[i]);
}

INSTANTIATE_TEST_SUITE_P(Shapes, SvdShapes,
                         ::testing::Values(std::pair{5, 5}, std::pair{8, 3}, std::pair{3, 8},
                                           std::pair{64, 10}, std::pair{10, 64}, std::pair{30, 17}));

TEST(Svd, SignConventionFirstComponentPositive) {
  const Matrix a = random_matrix(12, 7, 5);
  const SvdResult s = thin_svd(a);
  for (std::size_t c = 0; c < s.u.cols(); ++c) {
    for (std::size_t r = 0; r < s.u.rows(); ++r) {
      if (std::fabs(s.u(r, c)) > 1e-10) {
        EXPECT_GT(s.u(r, c), 0.0);
        break;
      }
    }
  }
}

TEST(Svd, RankDeficientSpectrum) {
  // rank 2 matrix built from outer products
  const Matrix l = random_matrix(9, 2, 1);
  const Matrix r = random_matrix(2, 6, 2);
  const SvdResult s = thin_svd(matmul(l, r));
  EXPECT_EQ(numerical_rank(s.sigma), 2u);
  EXPECT_LT(s.sigma[2], 1e-12 * s.sigma[0]);
}

TEST(Svd, DeterministicAcrossCalls) {
  const Matrix a = random_matrix(20, 50, 9);
  const SvdResult s1 = thin_svd(a, false);
  const SvdResult s2 = thin_svd(a, false);
  EXPECT_EQ(s1.u, s2.u);
  EXPECT_EQ(s1.sigma, s2.sigma);
  EXPECT_TRUE(s1.v.empty());
}

TEST(Svd, WideLeftVectorsMatchFullComputation) {
  const Matrix a = random_matrix(6, 200, 11);
  const SvdResult fast = thin_svd(a, false);
  const SvdResult full = thin_svd(a, true);
  EXPECT_LT(max_abs_diff(fast.u, full.u), 1e-12);
}

TEST(Qr, ReconstructsAndIsOrthonormal) {
  const Matrix a = random_matrix(40, 7, 3);
  const QrResult qr = householder_qr(a);
  EXPECT_LT(relative_error(matmul(qr.q, qr.r), a), 1e-13);
  EXPECT_LT(orthonormality_error(qr.q), 1e-13);
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(qr.r(i, j), 0.0);
}

TEST(Orthonormalize, DropsDependentColumns) {
  Matrix a = random_matrix(6, 3, 4);
  Matrix b(6, 4);
  for (std::size_t r = 0; r < 6; ++r) {
    b(r, 0) = a(r, 0);
    b(r, 1) = a(r, 1);
    b(r, 2) = 2.0 * a(r, 0) - a(r, 1);
    b(r, 3) = a(r, 2);
  }
  const Matrix q = orthonormalize_columns(b);
  EXPECT_EQ(q.cols(), 3u);
  EXPECT_LT(orthonormality_error(q), 1e-13);
}

}  // namespace
}  // namespace watk
