#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"
#include "watk/neuron_attr.hpp"

namespace watk {
namespace {

using testing::lively_model;
using testing::random_matrix;
using testing::tiny_config;

CalibExample make_example(const std::string& prompt, const std::string& response) {
  CalibExample ex;
  ex.prompt = prompt;
  ex.response = response;
  return tokenize(ex, 32);
}

ActivationMatrix activations(Matrix x) {
  ActivationMatrix a;
  a.data = std::move(x);
  return a;
}

ScoreMatrix score_matrix(Matrix s, Role role = Role::kSafety) {
  ScoreMatrix m;
  m.scores = std::move(s);
  m.role = role;
  return m;
}

NeuronSet make_set(std::size_t rows, std::size_t cols, std::vector<Coord> coords) {
  NeuronSet s;
  s.rows = rows;
  s.cols = cols;
  s.coords = std::move(coords);
  s.normalize();
  return s;
}

TEST(Wanda, WorkedExample) {
  const Matrix w{{1, -2}, {3, 4}};
  // X_in is d_in x n; feature 0 sees (1, 0), feature 1 sees (0, 2).
  const auto s = wanda_score(w, activations(Matrix{{1, 0}, {0, 2}}));
  EXPECT_EQ(s.scores, (Matrix{{1, 4}, {3, 8}}));
}

TEST(Wanda, ZeroActivationsGiveZeroScores) {
  const auto s = wanda_score(random_matrix(3, 4, 1), activations(Matrix(4, 6)));
  EXPECT_EQ(s.scores, Matrix(3, 4));
}

TEST(Wanda, EqualsSingleEntryRemovalNorm) {
  const Matrix w = random_matrix(4, 5, 2);
  const Matrix x = random_matrix(5, 16, 3);
  const auto s = wanda_score(w, activations(x));
  const Matrix y = matmul(w, x);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      Matrix w0 = w;
      w0(i, j) = 0.0;
      const double change = (y - matmul(w0, x)).frobenius_norm();
      EXPECT_NEAR(s.scores(i, j), change, 1e-12 * std::max(1.0, change));
    }
}

TEST(Wanda, DimensionMismatch) {
  EXPECT_THROW(wanda_score(Matrix(2, 3), activations(Matrix(2, 4))), ValidationError);
}

TEST(Snip, ZeroWeightsGiveZeroScores) {
  ModelCheckpoint m = lively_model(tiny_config(), 4);
  const LayerAddress a{1, LayerName::kUp};
  m.weight(a).fill(0.0);
  const std::vector<CalibExample> ex{make_example("ab", "cd")};
  const auto s = snip_score(m, ex, {a}, Role::kSafety);
  EXPECT_EQ(s.at(a).scores, Matrix(m.weight(a).rows(), m.weight(a).cols()));
}

TEST(Snip, TwoExampleAverageOfAbsoluteValues) {
  const ModelCheckpoint m = lively_model(tiny_config(), 5);
  const std::vector<CalibExample> ex{make_example("ab", "cd"), make_example("xyz", "q")};
  std::set<LayerAddress> addrs;
  for (const auto& a : m.linear_addresses()) addrs.insert(a);
  const auto s = snip_score(m, ex, addrs, Role::kUtility);
  const GradientSet g1 = grad_loss(m, ex[0]);
  const GradientSet g2 = grad_loss(m, ex[1]);
  for (const auto& a : addrs) {
    const Matrix& w = m.weight(a);
    const Matrix& got = s.at(a).scores;
    EXPECT_EQ(s.at(a).role, Role::kUtility);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double want = (std::fabs(w.data()[i] * g1.at(a).data()[i]) +
                           std::fabs(w.data()[i] * g2.at(a).data()[i])) / 2.0;
      ASSERT_NEAR(got.data()[i], want, 1e-12 * std::max(1.0, want)) << a.str();
    }
  }
}

TEST(Snip, SingletonIsAbsoluteProduct) {
  const ModelCheckpoint m = lively_model(tiny_config(), 6);
  const std::vector<CalibExample> ex{make_example("hello", "world")};
  const LayerAddress a{0, LayerName::kV};
  const auto s = snip_score(m, ex, {a}, Role::kSafety);
  const Matrix want = [&] {
    Matrix h = hadamard(m.weight(a), grad_loss(m, ex[0]).at(a));
    for (double& v : h.storage()) v = std::fabs(v);
    return h;
  }();
  EXPECT_LT(max_abs_diff(s.at(a).scores, want), 1e-15);
}

TEST(Snip, IndependentOfThreadCount) {
  const ModelCheckpoint m = lively_model(tiny_config(), 7);
  std::vector<CalibExample> ex;
  for (int i = 0; i < 19; ++i) ex.push_back(make_example(std::string(1 + i % 4, 'a' + i % 7), "ok"));
  const std::set<LayerAddress> addrs{{0, LayerName::kQ}, {1, LayerName::kDown}};
  const auto a = snip_score(m, ex, addrs, Role::kSafety);
  const auto b = snip_score(m, ex, addrs, Role::kSafety);
  for (const auto& addr : addrs) EXPECT_EQ(a.at(addr).scores, b.at(addr).scores);
}

TEST(Snip, HalvingAnEntryHalvesItsScore) {
  ModelCheckpoint m = lively_model(tiny_config(), 8);
  const std::vector<CalibExample> ex{make_example("ab", "cde")};
  const LayerAddress a{1, LayerName::kDown};
  // Near zero the gradient no longer depends on the entry, so the score is linear in it.
  m.weight(a)(2, 3) *= 1e-3;
  const auto before = snip_score(m, ex, {a}, Role::kSafety).at(a).scores;
  m.weight(a)(2, 3) *= 0.5;
  const auto after = snip_score(m, ex, {a}, Role::kSafety).at(a).scores;
  ASSERT_GT(before(2, 3), 0.0);
  EXPECT_NEAR(after(2, 3) / before(2, 3), 0.5, 1e-3);
}

TEST(Snip, LossChangeConvergesToScore) {
  ModelCheckpoint m = lively_model(tiny_config(), 9);
  const CalibExample ex = make_example("abc", "de");
  const LayerAddress a{0, LayerName::kUp};
  // Scale the entry toward zero, then compare the loss change from removing it with the score.
  m.weight(a)(1, 1) *= 1e-3;
  const double score = snip_score(m, std::vector<CalibExample>{ex}, {a}, Role::kSafety).at(a).scores(1, 1);
  ModelCheckpoint z = m;
  z.weight(a)(1, 1) = 0.0;
  const double change = std::fabs(conditional_loss(z, ex) - conditional_loss(m, ex));
  ASSERT_GT(score, 0.0);
  EXPECT_NEAR(change / score, 1.0, 0.05);
}

TEST(Snip, EmptyDatasetRejected) {
  const ModelCheckpoint m = lively_model(tiny_config(), 10);
  EXPECT_THROW(snip_score(m, std::vector<CalibExample>{}, {{0, LayerName::kQ}}, Role::kSafety),
               ValidationError);
}

TEST(Selection, PerRowCountRoundsHalfUp) {
  EXPECT_EQ(per_row_count(50, 2), 1u);
  EXPECT_EQ(per_row_count(25, 2), 1u);  // 0.5 rounds up
  EXPECT_EQ(per_row_count(24, 2), 0u);
  EXPECT_EQ(per_row_count(100, 7), 7u);
  EXPECT_EQ(per_row_count(0, 7), 0u);
  EXPECT_THROW(per_row_count(-1, 4), ValidationError);
  EXPECT_THROW(per_row_count(101, 4), ValidationError);
}

TEST(Selection, WorkedExample) {
  const auto s = top_fraction_per_row(score_matrix(Matrix{{1, 4}, {3, 8}}), 50);
  EXPECT_EQ(s.coords, (std::vector<Coord>{{0, 1}, {1, 1}}));
  EXPECT_EQ(s.q, 50.0);
  EXPECT_FALSE(s.p.has_value());
}

TEST(Selection, BoundaryFractions) {
  const ScoreMatrix sm = score_matrix(random_matrix(3, 5, 11));
  EXPECT_TRUE(top_fraction_per_row(sm, 0).coords.empty());
  EXPECT_EQ(top_fraction_per_row(sm, 100).size(), 15u);
}

TEST(Selection, TiesPreferLowerColumn) {
  const ScoreMatrix sm = score_matrix(Matrix{{2, 5, 5, 5}, {1, 1, 1, 1}});
  EXPECT_EQ(top_fraction_per_row(sm, 50).coords, (std::vector<Coord>{{0, 1}, {0, 2}, {1, 0}, {1, 1}}));
  EXPECT_EQ(bottom_fraction_per_row(sm, 50).coords, (std::vector<Coord>{{0, 0}, {0, 1}, {1, 0}, {1, 1}}));
}

TEST(Selection, UtilityRoleRecordsP) {
  const auto s = top_fraction_per_row(score_matrix(Matrix{{1, 2}}, Role::kUtility), 50);
  EXPECT_EQ(s.p, 50.0);
  EXPECT_FALSE(s.q.has_value());
}

TEST(Selection, MonotoneInFraction) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix m = random_matrix(6, 13, 100 + trial);
    // Coarse values force many ties.
    for (double& v : m.storage()) v = std::round(std::fabs(v) * 2.0);
    const ScoreMatrix sm = score_matrix(m);
    double q1 = std::uniform_real_distribution<double>(0, 100)(rng);
    double q2 = std::uniform_real_distribution<double>(0, 100)(rng);
    if (q1 > q2) std::swap(q1, q2);
    const auto a = top_fraction_per_row(sm, q1);
    const auto b = top_fraction_per_row(sm, q2);
    for (const auto& c : a.coords) EXPECT_TRUE(b.contains(c));
  }
}

TEST(SetAlgebra, Examples) {
  const auto s = make_set(2, 2, {{0, 0}, {0, 1}});
  const auto u = make_set(2, 2, {{0, 1}});
  EXPECT_EQ(set_difference(s, u).coords, (std::vector<Coord>{{0, 0}}));
  EXPECT_TRUE(set_difference(u, s).coords.empty());

  const ScoreMatrix sm = score_matrix(random_matrix(3, 4, 13));
  ScoreMatrix um = score_matrix(random_matrix(3, 4, 14), Role::kUtility);
  const auto all = set_difference(top_fraction_per_row(sm, 100), top_fraction_per_row(um, 0));
  EXPECT_EQ(all.size(), 12u);
  EXPECT_EQ(all.p, 0.0);
  EXPECT_EQ(all.q, 100.0);
}

TEST(SetAlgebra, AddressMismatch) {
  auto a = make_set(2, 2, {});
  auto b = make_set(2, 2, {});
  b.address = {1, LayerName::kK};
  EXPECT_THROW(set_difference(a, b), ValidationError);
}

TEST(SetAlgebra, NormalizeRejectsOutOfRange) {
  NeuronSet s;
  s.rows = 2;
  s.cols = 2;
  s.coords = {{2, 0}};
  EXPECT_THROW(s.normalize(), ValidationError);
}

TEST(SetAlgebra, TextRoundTrip) {
  const ModelCheckpoint m = ModelCheckpoint::zeros(tiny_config());
  auto s = make_set(16, 16, {{0, 3}, {5, 1}, {15, 15}});
  s.address = {1, LayerName::kO};
  auto e = make_set(24, 16, {});
  e.address = {0, LayerName::kGate};
  const std::string text = format_neuron_sets({s, e});
  EXPECT_EQ(text, "1.self_attn.o: (0,3) (5,1) (15,15)\n0.mlp.gate:\n");
  const auto back = parse_neuron_sets("# comment\n" + text, m);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].address, s.address);
  EXPECT_EQ(back[0].coords, s.coords);
  EXPECT_TRUE(back[1].coords.empty());
  EXPECT_THROW(parse_neuron_sets("1.self_attn.o: (16,0)\n", m), ValidationError);
  EXPECT_THROW(parse_neuron_sets("1.self_attn.o (1,0)\n", m), ValidationError);
}

TEST(Prune, ZeroFractionLeavesModelUnchanged) {
  const ModelCheckpoint m = lively_model(tiny_config(), 15);
  const std::vector<CalibExample> s{make_example("ab", "no")};
  const std::vector<CalibExample> u{make_example("cd", "yes")};
  for (PruneMethod method : {PruneMethod::kWandaTop, PruneMethod::kSnipTop}) {
    const auto r = blockwise_prune(m, s, {}, method, {0, 0});
    EXPECT_EQ(r.model, m);
    EXPECT_EQ(r.actual_sparsity(), 0.0);
  }
  const auto r = blockwise_prune(m, s, u, PruneMethod::kSnipSetDiff, {30, 0});
  EXPECT_EQ(r.model, m);
  EXPECT_EQ(r.sets.size(), m.linear_addresses().size());
}

TEST(Prune, SetDifferenceNeedsUtility) {
  const ModelCheckpoint m = lively_model(tiny_config(), 16);
  const std::vector<CalibExample> s{make_example("ab", "no")};
  EXPECT_THROW(blockwise_prune(m, s, {}, PruneMethod::kSnipSetDiff, {1, 1}), ValidationError);
}

TEST(Prune, SparsityIsZeroedOverLinearWeights) {
  const ModelCheckpoint m = lively_model(tiny_config(), 17);
  const std::vector<CalibExample> s{make_example("ab", "no"), make_example("c", "nope")};
  const auto r = blockwise_prune(m, s, {}, PruneMethod::kWandaTop, {25, 0});
  std::size_t zeros = 0;
  for (const auto& a : r.model.linear_addresses())
    for (double v : r.model.weight(a).storage()) zeros += v == 0.0;
  EXPECT_EQ(r.zeroed, zeros);
  EXPECT_EQ(r.total, m.linear_parameter_count());
  EXPECT_DOUBLE_EQ(r.actual_sparsity(), static_cast<double>(zeros) / static_cast<double>(r.total));
  // 16 inputs: 4 per row; 24 inputs (down): 6 per row.
  EXPECT_EQ(r.sets[0].size(), 16u * 4u);
  EXPECT_EQ(r.sets[6].size(), 16u * 6u);
}

TEST(Prune, LaterBlocksAreScoredOnThePrunedModel) {
  const ModelCheckpoint m = lively_model(tiny_config(), 18);
  const std::vector<CalibExample> s{make_example("abc", "no"), make_example("de", "nope")};
  const auto r = blockwise_prune(m, s, {}, PruneMethod::kWandaTop, {20, 0});

  // Block 1 selections must match scores taken after block 0 is masked.
  ModelCheckpoint partial = m;
  for (std::size_t i = 0; i < 7; ++i) partial = apply_neuron_mask(partial, r.sets[i], MaskMode::kZeroSelected);
  const std::set<LayerAddress> block1{{1, LayerName::kQ}, {1, LayerName::kUp}};
  const auto fresh = wanda_scores(partial, s, block1, Role::kSafety);
  const auto stale = wanda_scores(m, s, block1, Role::kSafety);
  EXPECT_EQ(top_fraction_per_row(fresh.at({1, LayerName::kQ}), 20).coords, r.sets[7].coords);
  EXPECT_EQ(top_fraction_per_row(fresh.at({1, LayerName::kUp}), 20).coords, r.sets[12].coords);

  const auto cap_fresh = capture_examples(partial, s, block1);
  const auto cap_stale = capture_examples(m, s, block1);
  EXPECT_GT(max_abs_diff(cap_fresh.at({1, LayerName::kQ}).data, cap_stale.at({1, LayerName::kQ}).data), 1e-6);
  EXPECT_NE(fresh.at({1, LayerName::kQ}).scores, stale.at({1, LayerName::kQ}).scores);
}

TEST(Prune, BottomMethodSelectsLowestScores) {
  const ModelCheckpoint m = lively_model(tiny_config(), 19);
  const std::vector<CalibExample> s{make_example("abc", "no")};
  const auto r = blockwise_prune(m, s, {}, PruneMethod::kSnipBottom, {50, 0});
  const auto scores = snip_score(m, s, {{0, LayerName::kQ}}, Role::kSafety);
  EXPECT_EQ(bottom_fraction_per_row(scores.at({0, LayerName::kQ}), 50).coords, r.sets[0].coords);
}

TEST(Prune, MethodNames) {
  for (const char* n : {"wanda-top", "snip-top", "wanda-setdiff", "snip-setdiff", "wanda-bottom", "snip-bottom"})
    EXPECT_EQ(to_string(parse_prune_method(n)), n);
  EXPECT_THROW(parse_prune_method("magnitude"), ValidationError);
}

}  // namespace
}  // namespace watk
