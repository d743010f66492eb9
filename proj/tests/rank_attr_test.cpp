#include <gtest/gtest.h>

#include <Eigen/QR>
#include <Eigen/SVD>
#include <random>

#include "test_util.hpp"
#include "watk/linalg.hpp"
#include "watk/rank_attr.hpp"

namespace watk {
namespace {

using testing::from_eigen;
using testing::lively_model;
using testing::random_matrix;
using testing::tiny_config;
using testing::to_eigen;

ActivationMatrix activations(Matrix x) {
  ActivationMatrix a;
  a.data = std::move(x);
  return a;
}

ProjectionBasis basis_of(Matrix u) {
  ProjectionBasis b;
  b.u = std::move(u);
  return b;
}

Matrix projector(const Matrix& u) { return matmul_nt(u, u); }

Matrix low_rank(std::size_t rows, std::size_t cols, std::size_t rank, std::uint64_t seed) {
  return matmul(random_matrix(rows, rank, seed), random_matrix(rank, cols, seed + 1));
}

Matrix eigen_left_basis(const Matrix& a, std::size_t r) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a), Eigen::ComputeThinU);
  return from_eigen(svd.matrixU().leftCols(static_cast<Eigen::Index>(r)));
}

std::size_t eigen_rank(const Matrix& a, double abs_tol) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(to_eigen(a));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < svd.singularValues().size(); ++i) k += svd.singularValues()(i) > abs_tol;
  return k;
}

CalibExample make_example(const std::string& prompt, const std::string& response) {
  CalibExample ex;
  ex.prompt = prompt;
  ex.response = response;
  return tokenize(ex, 32);
}

TEST(ActSvd, WorkedExample) {
  const auto b = actsvd_basis(Matrix::identity(2), activations(Matrix{{2, 0}, {0, 1}}), 1);
  ASSERT_EQ(b.rank(), 1u);
  EXPECT_NEAR(std::fabs(b.u(0, 0)), 1.0, 1e-15);
  EXPECT_NEAR(b.u(1, 0), 0.0, 1e-15);
  ASSERT_EQ(b.spectrum.size(), 1u);
  EXPECT_NEAR(b.spectrum[0], 2.0, 1e-15);
}

TEST(ActSvd, ZeroActivationsHaveNoRank) {
  try {
    actsvd_basis(Matrix::identity(3), activations(Matrix(3, 5)), 1);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("numerical rank 0"), std::string::npos);
  }
}

TEST(ActSvd, RankAboveAvailableIsError) {
  const Matrix w = random_matrix(6, 8, 1);
  const Matrix x = low_rank(8, 20, 3, 2);
  EXPECT_EQ(activation_rank(w, activations(x)), 3u);
  EXPECT_THROW(actsvd_basis(w, activations(x), 4), ValidationError);
  EXPECT_THROW(actsvd_basis(w, activations(x), 0), ValidationError);
}

TEST(ActSvd, ResidualIsTailEnergy) {
  const Matrix w = random_matrix(6, 8, 3);
  const Matrix x = random_matrix(8, 20, 4);
  const Matrix y = matmul(w, x);
  Eigen::JacobiSVD<Eigen::MatrixXd> oracle(to_eigen(y));
  const auto& sv = oracle.singularValues();
  for (std::size_t r = 1; r <= 6; ++r) {
    const auto b = actsvd_basis(w, activations(x), r);
    EXPECT_LT((matmul_tn(b.u, b.u) - Matrix::identity(r)).frobenius_norm(), 1e-8);
    double tail = 0.0;
    for (Eigen::Index i = static_cast<Eigen::Index>(r); i < sv.size(); ++i) tail += sv(i) * sv(i);
    const Matrix resid = y - matmul(project_keep(w, b), x);
    const double got = resid.frobenius_norm() * resid.frobenius_norm();
    EXPECT_NEAR(got, tail, 1e-8 * std::max(tail, sv(0) * sv(0)));
    for (std::size_t i = 0; i < r; ++i) EXPECT_NEAR(b.spectrum[i], sv(static_cast<Eigen::Index>(i)), 1e-10 * sv(0));
  }
}

TEST(ActSvd, BeatsRandomProjectors) {
  const Matrix w = random_matrix(10, 12, 5);
  const Matrix x = random_matrix(12, 30, 6);
  const Matrix y = matmul(w, x);
  const std::size_t r = 4;
  const auto b = actsvd_basis(w, activations(x), r);
  const double best = (y - matmul(project_keep(w, b), x)).frobenius_norm();
  for (int t = 0; t < 100; ++t) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(random_matrix(10, r, 1000 + t)));
    const Matrix q = from_eigen(qr.householderQ() * Eigen::MatrixXd::Identity(10, r));
    const double other = (y - matmul(matmul(projector(q), w), x)).frobenius_norm();
    EXPECT_LE(best, other + 1e-12);
  }
}

TEST(Projection, FullBasisIsIdentity) {
  const Matrix w = random_matrix(4, 3, 7);
  const Matrix q = eigen_left_basis(random_matrix(4, 4, 8), 4);
  EXPECT_LT(max_abs_diff(project_keep(w, basis_of(q)), w), 1e-13);
}

TEST(Projection, SingleAxis) {
  const Matrix w{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}};
  const Matrix e1{{1}, {0}, {0}};
  EXPECT_EQ(project_keep(w, basis_of(e1)), (Matrix{{1, 2, 3}, {0, 0, 0}, {0, 0, 0}}));
}

TEST(Projection, ProjectorAlgebra) {
  const Matrix w = random_matrix(9, 7, 9);
  const auto b = actsvd_basis(w, activations(random_matrix(7, 15, 10)), 3);
  const Matrix p = projector(b.u);
  EXPECT_LT(max_abs_diff(matmul(p, p), p), 1e-8);
  EXPECT_LT(max_abs_diff(p.transposed(), p), 1e-8);
  EXPECT_NEAR(thin_svd(p, false).sigma[0], 1.0, 1e-8);
  const Matrix once = project_keep(w, b);
  EXPECT_LT(max_abs_diff(project_keep(once, b), once), 1e-12);
  EXPECT_EQ(weight_rank(once), 3u);
}

TEST(Projection, ShapeMismatch) {
  EXPECT_THROW(project_keep(Matrix(3, 3), basis_of(Matrix(4, 1))), ValidationError);
}

TEST(RemoveRanks, FullRankPreservesOutputs) {
  const Matrix w = random_matrix(8, 6, 11);
  const Matrix x = random_matrix(6, 10, 12);
  const std::size_t r = activation_rank(w, activations(x));
  ASSERT_EQ(r, 6u);
  const auto rr = remove_least_ranks(w, activations(x), r);
  EXPECT_LT(max_abs_diff(matmul(rr.w_hat, x), matmul(w, x)), 1e-9);
  EXPECT_THROW(remove_least_ranks(w, activations(x), 0), ValidationError);
}

TEST(RemoveRanks, ErrorGrowsAsRanksAreRemoved) {
  const Matrix w = random_matrix(7, 9, 13);
  const Matrix x = random_matrix(9, 25, 14);
  const Matrix y = matmul(w, x);
  double prev = -1.0;
  for (std::size_t keep = 7; keep >= 1; --keep) {
    const double err = (y - matmul(remove_least_ranks(w, activations(x), keep).w_hat, x)).frobenius_norm();
    EXPECT_GE(err, prev - 1e-12);
    prev = err;
  }
}

TEST(Isolate, TableArithmetic) { EXPECT_EQ(rank_bound(4096, 3950, 4090), 6u); }

TEST(Isolate, DegenerateProjectorsGiveZero) {
  const Matrix w = random_matrix(5, 5, 15);
  const auto ident = basis_of(Matrix::identity(5));
  const auto s = actsvd_basis(w, activations(random_matrix(5, 9, 16)), 3);
  // Utility keeps everything: nothing is orthogonal to it.
  const auto d1 = isolate_delta(w, ident, s);
  EXPECT_LT(d1.delta.frobenius_norm(), 1e-12);
  EXPECT_EQ(d1.declared_rank_bound, 0u);
  // Safety keeps nothing.
  const auto d2 = isolate_delta(w, s, empty_basis({}, 5, Role::kSafety));
  EXPECT_EQ(d2.delta, Matrix(5, 5));
  EXPECT_EQ(d2.declared_rank_bound, 0u);
}

TEST(Isolate, ComplementIdentity) {
  const Matrix w = random_matrix(6, 4, 17);
  const auto ident = basis_of(Matrix::identity(6));
  // Pi^s = I with Pi^u = I leaves nothing to subtract.
  EXPECT_LT(isolate_delta(w, ident, ident).delta.frobenius_norm(), 1e-13);
  // Pi^s = I with Pi^u = 0 isolates W itself.
  EXPECT_LT(max_abs_diff(isolate_delta(w, empty_basis({}, 6, Role::kUtility), ident).delta, w), 1e-13);
  const Matrix x = random_matrix(4, 12, 18);
  EXPECT_LT(max_abs_diff(remove_least_ranks(w, activations(x), 4).w_hat, w), 1e-12);
}

class RankBound : public ::testing::TestWithParam<std::size_t> {};

TEST_P(RankBound, HoldsOnRandomGrid) {
  const std::size_t big_r = GetParam();
  std::mt19937_64 rng(big_r);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t d_out = big_r + trial % 3 * 4;
    const Matrix w = low_rank(d_out, big_r + 8, big_r, 100 + trial);
    const Matrix xu = random_matrix(big_r + 8, 3 * big_r, 200 + trial);
    const Matrix xs = random_matrix(big_r + 8, 3 * big_r, 300 + trial);
    ASSERT_EQ(weight_rank(w), big_r);
    std::uniform_int_distribution<std::size_t> pick(0, big_r);
    const std::size_t ru = pick(rng), rs = pick(rng);
    const auto ub = ru < big_r ? actsvd_basis(w, activations(xu), big_r - ru, Role::kUtility)
                               : empty_basis({}, d_out, Role::kUtility);
    const auto sb = rs < big_r ? actsvd_basis(w, activations(xs), big_r - rs)
                               : empty_basis({}, d_out, Role::kSafety);
    const RankDelta d = isolate_delta(w, ub, sb);
    EXPECT_EQ(d.declared_rank_bound, std::min(ru, big_r - rs));
    EXPECT_LE(eigen_rank(d.delta, 1e-9 * thin_svd(w, false).sigma[0]), d.declared_rank_bound)
        << "ru=" << ru << " rs=" << rs;
  }
}

INSTANTIATE_TEST_SUITE_P(Sizes, RankBound, ::testing::Values(16u, 64u));

TEST(Lora, ZeroDelta) {
  RankDelta d;
  d.delta = Matrix(4, 5);
  const auto f = lora_factorize(d);
  ASSERT_TRUE(f.factors);
  EXPECT_EQ(f.factors->first.cols(), 0u);
  EXPECT_EQ(f.factors->second.rows(), 0u);
}

TEST(Lora, RankOneOuterProduct) {
  RankDelta d;
  d.delta = matmul(Matrix{{1}, {2}, {3}}, Matrix{{4, 5}});
  const auto f = lora_factorize(d);
  EXPECT_EQ(f.factors->first.cols(), 1u);
  EXPECT_LT(relative_error(matmul(f.factors->first, f.factors->second), d.delta), 1e-12);
}

TEST(Lora, ConstructedRankThree) {
  RankDelta d;
  d.delta = Matrix(10, 10);
  for (int k = 0; k < 3; ++k) d.delta += matmul(random_matrix(10, 1, 20 + k), random_matrix(1, 10, 30 + k));
  const auto f = lora_factorize(d);
  EXPECT_EQ(f.factors->first.cols(), 3u);
  EXPECT_LT(relative_error(matmul(f.factors->first, f.factors->second), d.delta), 1e-10);

  ModelCheckpoint m = lively_model(tiny_config(10, 1), 40);
  const LayerAddress a{0, LayerName::kO};
  m.weight(a) = random_matrix(10, 10, 41);
  const auto direct = subtract_delta(m, a, d.delta);
  const auto factored = subtract_delta(m, a, matmul(f.factors->first, f.factors->second));
  EXPECT_LT(max_abs_diff(direct.weight(a), factored.weight(a)), 1e-10);
}

TEST(Asvd, ZeroExponentIsPlainSvd) {
  const Matrix w = random_matrix(5, 6, 50);
  const auto b = asvd_basis(w, activations(random_matrix(6, 9, 51)), 3, 0.0, AsvdMode::kMean);
  EXPECT_LT(max_abs_diff(projector(b.u), projector(eigen_left_basis(w, 3))), 1e-10);
}

TEST(Asvd, MeanScalingWorkedExample) {
  // |X| rows average to 1 and 4; alpha = 0.5 gives S = diag(1, 2).
  const Matrix x{{1, -1, 1, -1}, {4, -2, 6, -4}};
  const auto b = asvd_basis(Matrix::identity(2), activations(x), 2, 0.5, AsvdMode::kMean);
  EXPECT_NEAR(b.spectrum[0], 2.0, 1e-14);
  EXPECT_NEAR(b.spectrum[1], 1.0, 1e-14);
  EXPECT_NEAR(std::fabs(b.u(1, 0)), 1.0, 1e-14);
}

TEST(Asvd, ScalingActivationsKeepsSubspace) {
  const Matrix w = random_matrix(6, 5, 52);
  const Matrix x = random_matrix(5, 11, 53);
  const auto a = asvd_basis(w, activations(x), 2, 0.7, AsvdMode::kMax);
  const auto b = asvd_basis(w, activations(3.0 * x), 2, 0.7, AsvdMode::kMax);
  EXPECT_NEAR(b.spectrum[0] / a.spectrum[0], std::pow(3.0, 0.7), 1e-12);
  EXPECT_LT(max_abs_diff(projector(a.u), projector(b.u)), 1e-10);
}

TEST(Asvd, DeadFeatureNamed) {
  Matrix x = random_matrix(3, 4, 54);
  for (double& v : x.row(1)) v = 0.0;
  try {
    asvd_basis(random_matrix(2, 3, 55), activations(x), 1, 1.0, AsvdMode::kMean);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("feature 1"), std::string::npos);
  }
}

TEST(Fisher, ZeroGradientsGiveZeroDiagonal) {
  ModelCheckpoint m = lively_model(tiny_config(), 60);
  m.unembed.fill(0.0);
  const std::vector<CalibExample> ex{make_example("ab", "c")};
  const auto f = fisher_diagonal(m, ex, {{0, LayerName::kQ}, {1, LayerName::kDown}});
  for (const auto& [a, d] : f)
    for (double v : d.values) EXPECT_EQ(v, 0.0);
}

TEST(Fisher, MatchesDirectFormula) {
  const ModelCheckpoint m = lively_model(tiny_config(), 61);
  const std::vector<CalibExample> ex{make_example("ab", "cd"), make_example("efg", "h")};
  const LayerAddress a{1, LayerName::kGate};
  const Matrix g1 = grad_loss(m, ex[0]).at(a);
  const Matrix g2 = grad_loss(m, ex[1]).at(a);
  const auto two = fisher_diagonal(m, ex, {a}).at(a);
  const auto one = fisher_diagonal(m, std::span(ex).first(1), {a}).at(a);
  for (std::size_t i = 0; i < g1.rows(); ++i) {
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t j = 0; j < g1.cols(); ++j) {
      s1 += g1(i, j) * g1(i, j);
      s2 += (g1(i, j) * g1(i, j) + g2(i, j) * g2(i, j)) / 2.0;
    }
    EXPECT_NEAR(one.values[i], std::sqrt(s1), 1e-12 * std::max(1.0, std::sqrt(s1)));
    EXPECT_NEAR(two.values[i], std::sqrt(s2), 1e-12 * std::max(1.0, std::sqrt(s2)));
  }
}

TEST(Fwsvd, UnitFisherIsPlainSvd) {
  const Matrix w = random_matrix(5, 7, 62);
  FisherDiagonal f;
  f.values.assign(5, 1.0);
  const auto b = fwsvd_basis(w, f, 2);
  EXPECT_LT(max_abs_diff(projector(b.u), projector(eigen_left_basis(w, 2))), 1e-10);
}

TEST(Fwsvd, FullRankIsIdentity) {
  const Matrix w = random_matrix(4, 6, 63);
  FisherDiagonal f;
  f.values = {0.5, 2.0, 1.0, 3.0};
  EXPECT_LT(max_abs_diff(project_keep(w, fwsvd_basis(w, f, 4)), w), 1e-12);
}

TEST(Fwsvd, MatchesIndependentWeightedSvd) {
  const Matrix w = random_matrix(4, 4, 64);
  FisherDiagonal f;
  f.values = {0.3, 1.7, 0.9, 2.4};
  Matrix fw = w;
  for (std::size_t i = 0; i < 4; ++i)
    for (double& v : fw.row(i)) v *= f.values[i];
  Matrix back = eigen_left_basis(fw, 2);
  for (std::size_t i = 0; i < 4; ++i)
    for (double& v : back.row(i)) v /= f.values[i];
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(to_eigen(back));
  const Matrix q = from_eigen(qr.householderQ() * Eigen::MatrixXd::Identity(4, 2));
  const auto b = fwsvd_basis(w, f, 2);
  EXPECT_LT(max_abs_diff(projector(b.u), projector(q)), 1e-10);
  Eigen::JacobiSVD<Eigen::MatrixXd> oracle(to_eigen(fw));
  EXPECT_NEAR(b.spectrum[0], oracle.singularValues()(0), 1e-12);
}

TEST(Blockwise, ZeroDiscardsLeaveModelUnchanged) {
  const ModelCheckpoint m = lively_model(tiny_config(), 70);
  const std::vector<CalibExample> u{make_example("abcdefgh", "ijklmnop"), make_example("qrstuvw", "xyz01234"),
                                    make_example("56789", "ABCDEFGH")};
  const std::vector<CalibExample> s{make_example("hijklmn", "opqrstu"), make_example("vwxyz", "9876543")};
  const auto r0 = blockwise_rank_isolate(m, u, s, {0, 3});
  for (const auto& d : r0.deltas) EXPECT_LT(d.delta.frobenius_norm(), 1e-10);
  EXPECT_EQ(r0.max_bound(), 0u);
  const auto r1 = blockwise_rank_isolate(m, u, s, {5, 16});
  EXPECT_EQ(r1.model, m);
  EXPECT_EQ(r1.max_bound(), 0u);
}

TEST(Blockwise, RecordsBoundAndDeltaRank) {
  const ModelCheckpoint m = lively_model(tiny_config(), 71);
  const std::vector<CalibExample> u{make_example("abcdefgh", "ijklmnop"), make_example("qrstuvw", "xyz01234"),
                                    make_example("56789", "ABCDEFGH")};
  const std::vector<CalibExample> s{make_example("hijklmn", "opqrstu"), make_example("vwxyz", "9876543")};
  const auto r = blockwise_rank_isolate(m, u, s, {3, 10});
  ASSERT_EQ(r.layers.size(), 14u);
  for (const auto& l : r.layers) {
    EXPECT_EQ(l.big_r, 16u);
    EXPECT_EQ(l.bound, rank_bound(l.big_r, l.big_r - l.keep_u, l.big_r - l.keep_s));
    EXPECT_LE(l.delta_rank, l.bound);
    EXPECT_LE(l.bound, 3u);
  }
  EXPECT_EQ(r.max_bound(), 3u);
}

TEST(Blockwise, RankRemovalKeepsRequestedRanks) {
  const ModelCheckpoint m = lively_model(tiny_config(), 72);
  const std::vector<CalibExample> ex{make_example("abcdefgh", "ijklmnopqrstu"), make_example("vwxyz", "0123456789")};
  const auto r = blockwise_rank_remove(m, ex, 4);
  for (const auto& b : r.bases) EXPECT_EQ(b.rank(), 12u);
  for (const auto& a : r.model.linear_addresses()) EXPECT_EQ(weight_rank(r.model.weight(a)), 12u);
  EXPECT_THROW(blockwise_rank_remove(m, ex, 16), ValidationError);
}

TEST(Serialization, BasisAndDeltaTensors) {
  const Matrix w = random_matrix(6, 5, 73);
  auto b = actsvd_basis(w, activations(random_matrix(5, 8, 74)), 2, Role::kUtility);
  b.address = {2, LayerName::kUp};
  TensorFile f;
  f.tensors = basis_tensors(b);
  EXPECT_EQ(f.tensors[0].name, "2.mlp.up.U.utility");
  EXPECT_EQ(f.tensors[1].name, "2.mlp.up.U.utility.sigma");
  const auto back = basis_from_tensors(decode_tensor_file(encode_tensor_file(f)), b.address, Role::kUtility);
  EXPECT_LT(max_abs_diff(back.u, b.u), 1e-6);
  EXPECT_THROW(basis_from_tensors(f, b.address, Role::kSafety), ValidationError);

  RankDelta d;
  d.address = b.address;
  d.delta = matmul(Matrix{{1}, {2}}, Matrix{{3, 4}});
  const auto names = delta_tensors(lora_factorize(d));
  ASSERT_EQ(names.size(), 3u);
  EXPECT_EQ(names[0].name, "2.mlp.up.delta");
  EXPECT_EQ(names[1].name, "2.mlp.up.delta.A");
}

}  // namespace
}  // namespace watk
